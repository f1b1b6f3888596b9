"""TSR1 binary tensor files.

Layout: magic ``TSR1``, u32 ndim, ndim x u32 dims, then float32 row-major
payload, all little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSR1"


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 0:
        raise FormatError("TSR1 cannot store 0-d arrays")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError("truncated header")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims))
    if len(buf) != end + 4 * count:
        raise FormatError(f"payload is {len(buf) - end} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def f32_round(array) -> np.ndarray:
    """Round to the values a TSR1 file can hold, so save/load is lossless."""
    return np.asarray(array, dtype=np.float64).astype(np.float32).astype(np.float64)
