"""Binary checkpoint container.

Layout: magic ``FVE1``, little-endian u32 header length, a UTF-8 JSON header
listing parameter names/shapes/dtype in order, then the raw little-endian
float32 arrays concatenated in header order. Loading is all-or-nothing and
save(load(path)) reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import DiffTensor

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "checkpoint_bytes", "split_by_prefix"]

MAGIC = b"FVE1"


class CheckpointError(ValueError):
    pass


def _to_arrays(params: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, value in params.items():
        arr = value.data if isinstance(value, DiffTensor) else np.asarray(value)
        out[name] = np.ascontiguousarray(arr, dtype="<f4")
    return out


def checkpoint_bytes(params: dict) -> bytes:
    arrays = _to_arrays(params)
    header = [{"name": k, "shape": list(v.shape), "dtype": "f32"}
              for k, v in arrays.items()]
    hdr = json.dumps(header, separators=(",", ":")).encode("utf-8")
    body = b"".join(v.tobytes() for v in arrays.values())
    return MAGIC + struct.pack("<I", len(hdr)) + hdr + body


def save_checkpoint(params: dict, path: str):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} in {path}; expected {MAGIC!r}")
    if len(blob) < 8:
        raise CheckpointError(f"truncated checkpoint {path}: {len(blob)} bytes")
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    if 8 + hdr_len > len(blob):
        raise CheckpointError(
            f"corrupt header length {hdr_len} in {path} (file has {len(blob)} bytes)"
        )
    try:
        header = json.loads(blob[8:8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header in {path}: {exc}") from exc

    out: dict[str, np.ndarray] = {}
    offset = 8 + hdr_len
    for entry in header:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} in {path}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"truncated data for {entry['name']!r} at offset {offset} in {path}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes in {path}")
    return out


def split_by_prefix(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Parameters under `prefix.` with the prefix stripped."""
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}
