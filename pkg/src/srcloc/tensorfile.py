"""Reader and writer for the NLT1 dense tensor format.

Layout (little-endian)::

    b"NLT1" | u8 dtype (0=f64, 1=f32) | u8 ndim | ndim x u64 dims | row-major payload

Every binary artifact of the package (lead fields, operators, parameters,
optimizer moments) is stored in this format, usually next to a JSON sidecar.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NLT1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class TensorFileError(ValueError):
    """Raised for malformed, truncated or mismatched tensor files."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim > 255:
        raise TypeError("too many dimensions")
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    return header + payload


def read_header(buf: bytes, offset: int = 0) -> tuple[np.dtype, tuple[int, ...], int]:
    """Parse a header starting at ``offset``; return (dtype, shape, payload offset)."""
    if len(buf) < offset + 6:
        raise TensorFileError("truncated tensor header")
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFileError(f"bad magic {buf[offset:offset + 4]!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    end = offset + 6 + 8 * ndim
    if len(buf) < end:
        raise TensorFileError("truncated tensor header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset + 6)
    return _DTYPES[code], tuple(int(s) for s in shape), end


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; return it with the offset just past it."""
    dtype, shape, start = read_header(buf, offset)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < start + nbytes:
        raise TensorFileError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - start}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), start + nbytes


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise TensorFileError(f"{len(buf) - end} trailing bytes after payload")
    if expect_shape is not None and tuple(arr.shape) != tuple(expect_shape):
        raise TensorFileError(f"shape {arr.shape} does not match expected {expect_shape}")
    return arr


def describe(path) -> dict:
    """Header summary used by ``srcloc inspect``; validates payload length."""
    buf = Path(path).read_bytes()
    dtype, shape, start = read_header(buf)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) != start + nbytes:
        raise TensorFileError(
            f"payload length {len(buf) - start} does not match header ({nbytes} bytes)"
        )
    return {
        "format": "NLT1",
        "dtype": str(dtype.newbyteorder("=")),
        "shape": list(shape),
        "bytes": len(buf),
        "sha256": hashlib.sha256(buf).hexdigest(),
    }


def digest(array: np.ndarray) -> str:
    """Content digest of an array (dtype, shape and bytes)."""
    return hashlib.sha256(encode(np.asarray(array))).hexdigest()[:16]
