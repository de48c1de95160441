"""Binary checkpoint format.

Layout (little-endian): magic ``FINST1``; u32 tensor count; per tensor: u32
name length, UTF-8 name, u8 dtype tag, u8 rank, u32 dims, raw row-major data.
Tensors are written in ascending name order. Tags: 0=f32, 1=f64, 2=raw bytes
(used for the ``__config__`` JSON blob).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"FINST1"
CONFIG_KEY = "__config__"
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], config: Optional[dict] = None) -> bytes:
    entries = {k: np.asarray(v) for k, v in tensors.items()}
    if config is not None:
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        entries[CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = entries[name]
        if arr.dtype == np.float32:
            arr = arr.astype("<f4")
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8")
        elif arr.dtype != np.uint8:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    if data[:6] != MAGIC:
        raise CheckpointError("bad magic")
    pos = 6
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dt = _DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(dims).copy()
        pos += n * dt.itemsize
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    config = None
    if CONFIG_KEY in tensors:
        config = json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8"))
    return tensors, config


def save(path, tensors: dict[str, np.ndarray], config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(tensors, config))
    return path


def load(path) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode(path.read_bytes())
