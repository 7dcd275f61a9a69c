"""Binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"CFSVCKPT"
    u32       format version (1)
    u32       metadata length, then UTF-8 JSON metadata
    u32       array count
    per array:
        u16   name length, then UTF-8 name
        u8    ndim, then ndim * u32 dims
        raw   float64 little-endian values, row-major

Round-trips are bit-exact: values are stored as the same 8-byte IEEE words
they occupy in memory.  `content_hash` digests the array section only, so two
checkpoints with identical weights hash identically regardless of metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"CFSVCKPT"
VERSION = 1


def _array_section(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim and not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path: Union[str, Path], meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(_array_section(arrays))


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 12)
    off = 16
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after array table")
    return meta, arrays


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 of the canonical array section (names sorted)."""
    ordered = {k: arrays[k] for k in sorted(arrays)}
    return hashlib.sha256(_array_section(ordered)).hexdigest()
