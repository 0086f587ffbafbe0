"""Binary artifact formats.

FVT1 (cell feature tensors)::

    b"FVT1" | uint32 T | uint32 cells | uint32 channels | uint32 n
    | n bytes of JSON manifest {"channels": [...], "meta": {...}}
    | float32 payload, time-major (T, cells, channels)

CKPT (named parameter tensors)::

    b"CKPT" | uint32 n | n bytes of JSON manifest
    {"kind": str, "meta": {...}, "tensors": [{"name", "shape"}, ...]}
    | float64 payload, tensors concatenated in manifest order

All integers and floats are little-endian; JSON is written with sorted
keys so equal inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "FormatError",
    "write_fvt",
    "read_fvt",
    "write_checkpoint",
    "read_checkpoint",
    "write_channel_csv",
]

FVT_MAGIC = b"FVT1"
CKPT_MAGIC = b"CKPT"


class FormatError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_fvt(path, features, channels, meta=None) -> None:
    x = np.asarray(features)
    if x.ndim != 3:
        raise ValueError(f"features must be (T, cells, channels), got {x.shape}")
    if len(channels) != x.shape[2]:
        raise ValueError("channel manifest does not match the channel dimension")
    manifest = _dumps({"channels": list(channels), "meta": meta or {}})
    with open(path, "wb") as fh:
        fh.write(FVT_MAGIC)
        fh.write(struct.pack("<4I", *x.shape, len(manifest)))
        fh.write(manifest)
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_fvt(path):
    """Return ``(features, channels, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FVT_MAGIC:
        raise FormatError(f"{path}: not an FVT1 file")
    t, cells, ch, n = struct.unpack_from("<4I", blob, 4)
    start = 20 + n
    manifest = json.loads(blob[20:start].decode("utf-8"))
    need = t * cells * ch * 4
    if len(blob) - start != need:
        raise FormatError(f"{path}: payload has {len(blob) - start} bytes, header implies {need}")
    data = np.frombuffer(blob, dtype="<f4", offset=start).reshape(t, cells, ch)
    return data.astype(np.float32), tuple(manifest["channels"]), manifest.get("meta", {})


def write_checkpoint(path, tensors: dict, kind: str, meta=None) -> None:
    names = list(tensors)
    arrays = [np.asarray(tensors[k], dtype="<f8") for k in names]
    manifest = _dumps({"kind": kind, "meta": meta or {},
                       "tensors": [{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)]})
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def read_checkpoint(path):
    """Return ``(tensors, kind, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a CKPT file")
    (n,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8:8 + n].decode("utf-8"))
    offset = 8 + n
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(blob):
            raise FormatError(f"{path}: truncated payload at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                               offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors, manifest["kind"], manifest.get("meta", {})


def write_channel_csv(path, features, channels, channel: str) -> None:
    """One row per frame, one column per cell, for a single channel."""
    x = np.asarray(features)
    k = list(channels).index(channel)
    with open(path, "w") as fh:
        fh.write("frame," + ",".join(f"cell_{i}" for i in range(x.shape[1])) + "\n")
        for t in range(x.shape[0]):
            fh.write(f"{t}," + ",".join(repr(float(v)) for v in x[t, :, k]) + "\n")
