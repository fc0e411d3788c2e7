"""TRXC checkpoint files: little-endian, length-prefixed named tensors.

Layout::

    "TRXC" | u32 version | u32 n + config JSON | 32-byte sha256 of the config
    | u32 tensor count | per tensor: u32 n + name, u8 dtype code, u32 ndim,
      u64 * ndim extents, raw little-endian data
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"TRXC"
VERSION = 1
_CODES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint8): 3,
             np.dtype(bool): 3}


class CheckpointError(ValueError):
    pass


def config_hash(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_checkpoint(path, config: dict, tensors: Dict[str, np.ndarray]) -> None:
    text = canonical_json(config)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(config_hash(text))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _BY_DTYPE:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        code = _BY_DTYPE[arr.dtype]
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(_CODES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> Tuple[dict, bytes, Dict[str, np.ndarray]]:
    """Return (config, stored config hash, tensors)."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack("<I", take(4))
    text = take(n).decode("utf-8")
    digest = take(32)
    if digest != config_hash(text):
        raise CheckpointError(f"{path}: config hash does not match embedded config")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = np.dtype(_CODES[code])
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return json.loads(text), digest, tensors
