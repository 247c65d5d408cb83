"""Binary checkpoint format "GVMC-1".

Layout: an 8-byte little-endian unsigned length, then that many bytes of
UTF-8 JSON manifest, then the raw tensor payload. The manifest records the
format version, the creating config, the root seed, a stage tag, optional
extra metadata (id maps), and a named-tensor directory mapping each name to
its shape, dtype, and byte offset into the payload.

Payloads are little-endian float32 by default (a documented lossy downcast
from float64 training values); `f64=True` keeps full precision so that
bit-exact round-trips and determinism comparisons are possible.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor, default_dtype

FORMAT_VERSION = "GVMC-1"
_DTYPE_BYTES = {"f32": 4, "f64": 8}
_DTYPE_NP = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(path, tensors: Dict[str, Tensor], *, config: dict,
                    seed: int, stage: str, extra: Optional[dict] = None,
                    f64: bool = False) -> None:
    """Write named parameter tensors with their manifest."""
    dtype = "f64" if f64 else "f32"
    names = sorted(tensors)
    directory = {}
    offset = 0
    blobs = []
    for name in names:
        data = tensors[name].data
        blob = np.ascontiguousarray(data, dtype=_DTYPE_NP[dtype]).tobytes()
        directory[name] = {"shape": list(data.shape), "dtype": dtype,
                           "offset": offset}
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format": FORMAT_VERSION,
        "config": config,
        "seed": seed,
        "stage": stage,
        "extra": extra or {},
        "tensors": directory,
        "payload_bytes": offset,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
    if manifest.get("format") != FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format {manifest.get('format')!r} is not {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path) -> tuple:
    """Returns (manifest, {name: ndarray}); arrays carry the stored dtype
    widened to the current default tensor dtype."""
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        (length,) = struct.unpack("<Q", fh.read(8))
        fh.seek(8 + length)
        payload = fh.read()
    expected = sum(
        _DTYPE_BYTES[spec["dtype"]] * int(np.prod(spec["shape"], dtype=np.int64))
        if spec["shape"] else _DTYPE_BYTES[spec["dtype"]]
        for spec in manifest["tensors"].values())
    if len(payload) != expected or expected != manifest["payload_bytes"]:
        raise DataError(
            f"checkpoint payload is {len(payload)} bytes, manifest says {expected}")
    arrays = {}
    for name, spec in manifest["tensors"].items():
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        start = spec["offset"]
        nbytes = count * _DTYPE_BYTES[spec["dtype"]]
        flat = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPE_NP[spec["dtype"]])
        arrays[name] = flat.reshape(spec["shape"]).astype(default_dtype())
    return manifest, arrays


def restore_params(params: Dict[str, Tensor], arrays: Dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameter tensors, name by name."""
    missing = sorted(set(params) - set(arrays))
    surplus = sorted(set(arrays) - set(params))
    if missing or surplus:
        raise DataError(
            f"checkpoint/model tensor names differ (missing {missing[:3]}, "
            f"surplus {surplus[:3]})")
    for name, tensor in params.items():
        if list(tensor.data.shape) != list(arrays[name].shape):
            raise DataError(
                f"tensor {name}: shape {list(arrays[name].shape)} does not match "
                f"model shape {list(tensor.data.shape)}")
        tensor.data[...] = arrays[name]
