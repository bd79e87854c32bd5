"""SMRT binary array container.

Layout (all little-endian)::

    b"SMRT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u16 ndim
    | ndim x u64 dims | row-major payload
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import BadMagicError, NonFiniteError, TruncatedError, UnsupportedVersionError, FormatError

MAGIC = b"SMRT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_HEAD = struct.Struct("<4sBBH")


def encode_array(arr, dtype=None) -> bytes:
    arr = np.asarray(arr)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to write non-finite values")
    code = _CODES[arr.dtype]
    header = _HEAD.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one SMRT block at ``offset``; return the array and the end offset."""
    view = memoryview(buf)
    if len(view) - offset < 4:
        raise TruncatedError("SMRT header truncated")
    if bytes(view[offset : offset + 4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[offset:offset + 4])!r}")
    if len(view) - offset < _HEAD.size:
        raise TruncatedError("SMRT header truncated")
    _, version, code, ndim = _HEAD.unpack_from(view, offset)
    if version != VERSION:
        raise UnsupportedVersionError(f"SMRT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown SMRT dtype code {code}")
    pos = offset + _HEAD.size
    if len(view) - pos < 8 * ndim:
        raise TruncatedError("SMRT dims truncated")
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) - pos < nbytes:
        raise TruncatedError(f"SMRT payload truncated: need {nbytes} bytes, have {len(view) - pos}")
    arr = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_array(path: str | os.PathLike, arr, dtype=None) -> None:
    data = encode_array(arr, dtype)
    with open(path, "wb") as fh:
        fh.write(data)


def read_array(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
