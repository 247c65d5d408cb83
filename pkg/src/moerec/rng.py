"""Seeded random sampling on a counter-based PRNG.

The generator is SplitMix64 used in counter mode, so the stream is a pure
function of ``(seed, counter)`` and can be reproduced bit-exactly in any
language. The full recipe, for porting:

- word ``i`` of the raw stream is ``mix64(seed + (i + 1) * GAMMA) mod 2**64``
  where ``GAMMA = 0x9E3779B97F4A7C15`` and ``mix64`` is the SplitMix64
  finalizer (xor-shift 30, multiply ``0xBF58476D1CE4E5B9``, xor-shift 27,
  multiply ``0x94D049BB133111EB``, xor-shift 31);
- a uniform double in ``[0, 1)`` is the top 53 bits of a word divided by
  ``2**53``;
- standard normals come from Box-Muller pairs: pair ``i`` of a call uses
  the call's uniform words ``2i`` and ``2i+1`` (0-indexed) as ``u1, u2``,
  with ``radius = sqrt(-2 * log(1 - u1))`` and outputs
  ``(radius * cos(2*pi*u2), radius * sin(2*pi*u2))``. A request for ``n``
  normals consumes exactly ``2 * ceil(n / 2)`` uniform words (an odd ``n``
  discards the trailing sine draw), so splitting one request into chunks of
  even length reproduces the unsplit stream bit-exactly; odd-length chunks
  do not.

Named substreams derive a child seed as ``mix64(seed XOR fnv1a64(label))``,
which keeps every consumer of the root seed independent and reorderable.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def _fnv1a64(label: str) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for byte in label.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * _FNV_PRIME
    return h


class Rng:
    """Deterministic random stream addressed by (seed, counter).

    Identical seeds yield bit-identical streams; the counter advances by the
    number of 64-bit words each call consumes.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def substream(self, label: str) -> "Rng":
        """Independent child stream for `label`; does not advance this one."""
        with np.errstate(over="ignore"):
            child = _mix64(np.uint64(self.seed ^ _fnv1a64(label)))
        return Rng(int(child))

    def _words(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """`n` doubles uniform on [0, 1), 53-bit resolution."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) / float(1 << 53)

    def normal(self, n: int) -> np.ndarray:
        """`n` i.i.d. standard normal doubles via Box-Muller.

        Pairs draw interleaved uniforms so even-sized chunked requests
        reproduce the stream of one large request.
        """
        if n == 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        uniforms = self.uniform(2 * pairs)
        u1 = uniforms[0::2]
        u2 = uniforms[1::2]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """`n` ints uniform on [0, bound) by scaling the 53-bit uniforms."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle; returns a new list, input untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            out[i], out[j] = out[j], out[i]
        return out

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to nonnegative `weights`."""
        total = float(np.sum(weights))
        if total <= 0:
            raise ValueError("weights must have positive sum")
        cum = np.cumsum(weights) / total
        u = float(self.uniform(1)[0])
        return int(np.searchsorted(cum, u, side="right"))
