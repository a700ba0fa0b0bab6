"""Flat binary container for a single tensor.

Layout (little-endian)::

    b"STNS" | version u32 | rank u32 | dims u64 * rank | dtype u32 (0=f64, 1=f32) | payload

The payload is the row-major buffer.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"STNS"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_OF = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class TensorFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _TAG_OF:
        arr = arr.astype(np.float64)
    tag = _TAG_OF[arr.dtype]
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", tag)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns the array and the end offset."""
    start = offset
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[offset:offset + 4]!r} at byte {offset}")
    offset += 4
    if len(buf) < offset + 8:
        raise TensorFormatError(f"truncated header at byte {offset}")
    version, rank = struct.unpack_from("<II", buf, offset)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at byte {offset}")
    offset += 8
    if len(buf) < offset + 8 * rank + 4:
        raise TensorFormatError(f"truncated dims at byte {offset}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    (tag,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if tag not in _DTYPE_TAGS:
        raise TensorFormatError(f"unknown dtype tag {tag} at byte {offset - 4}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TensorFormatError(
            f"truncated payload: tensor at byte {start} needs {nbytes} bytes from byte {offset}, "
            f"only {len(buf) - offset} available")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def save(path: str | Path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor ending at byte {end}")
    return arr


def write_to(fh: BinaryIO, array) -> int:
    data = encode(array)
    fh.write(data)
    return len(data)
