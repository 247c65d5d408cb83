"""Finite-difference verification of tape gradients.

``grad_check`` is the standing oracle for every differentiable operation:
it compares the tape's analytic gradient against central differences,
coordinate by coordinate, and reports the worst relative error. The
function under test must be a deterministic pure function of its input
(fix any sampling noise before checking).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tape, Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    Central differences with step `h` on flat coordinate indices `coords`
    (all coordinates when omitted). 64-bit input is required; differences
    are meaningless in single precision at h=1e-5.
    """
    if x.data.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 tensor")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    # no gradient reaching x means the analytic claim is "all zeros"; the
    # differences below will expose that claim if it is wrong
    analytic = (np.zeros(x.data.size) if x.grad is None
                else x.grad.reshape(-1).copy())
    x.grad = None

    flat = x.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        up = f(x).item()
        flat[i] = keep - h
        down = f(x).item()
        flat[i] = keep
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
