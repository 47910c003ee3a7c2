"""TMX1 checkpoint files.

Layout (little-endian)::

    b"TMX1"
    u32 count
    repeated count times:
        u32 name_len, name (utf-8)
        u32 rank, u32 dims[rank]
        f32 data[prod(dims)]

JSON metadata is stored as an ordinary rank-1 array whose elements are the
UTF-8 bytes of the document, so the format stays a plain list of float arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TMX1"
CONFIG_KEY = "config"


class CheckpointError(ValueError):
    pass


def encode_json(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8"))


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4").copy(order="C")  # keeps rank 0
        bname = name.encode("utf-8")
        parts.append(struct.pack("<I", len(bname)))
        parts.append(bname)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], config=None) -> None:
    arrays = dict(arrays)
    if config is not None:
        arrays[CONFIG_KEY] = encode_json(config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays))
    os.replace(tmp, path)


def load(path: str | os.PathLike, required: list[str] | None = None):
    """Read a checkpoint; returns ``(arrays, config_or_None)``."""
    path = Path(path)
    arrays = loads(path.read_bytes(), str(path))
    config = decode_json(arrays.pop(CONFIG_KEY)) if CONFIG_KEY in arrays else None
    if required:
        missing = [n for n in required if n not in arrays]
        if missing:
            raise CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    return arrays, config


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
