"""Binary parameter streams.

Layout (all integers little-endian)::

    magic      4 bytes   b"FANP"
    version    u16       FORMAT_VERSION
    dtype      u8        1 = float32, 2 = float64
    count      u32       number of tensors
    pversion   u64       ParameterSet.version
    table      count x { name_len u16, name utf-8, ndim u8, dims u32 * ndim }
    data       tensors in table order, raw little-endian values
    crc        u32       zlib.crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import CorruptStream, VersionMismatch
from .params import ParameterSet

MAGIC = b"FANP"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save_params(params: ParameterSet) -> bytes:
    dtypes = {v.dtype for _, v in params.items()}
    if len(dtypes) > 1:
        raise ValueError("mixed dtypes in one parameter set")
    code = _CODES[dtypes.pop()] if dtypes else 1
    out = bytearray(MAGIC)
    out += struct.pack("<HBIQ", FORMAT_VERSION, code, len(params), params.version)
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<HB", len(raw), arr.ndim) + raw
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in params.items():
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def load_params(data: bytes) -> ParameterSet:
    if len(data) < 4 + 15 + 4 or data[:4] != MAGIC:
        raise CorruptStream("not a parameter stream (bad magic or too short)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptStream("checksum mismatch (truncated or modified stream)")
    version, code, count, pversion = struct.unpack_from("<HBIQ", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"stream format {version}, reader supports {FORMAT_VERSION}")
    if code not in _DTYPES:
        raise CorruptStream(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    off = 4 + 15
    table = []
    try:
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            table.append((name, dims))
        tensors = []
        for name, dims in table:
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(dims)
            off += n * dtype.itemsize
            tensors.append((name, arr.astype(dtype.newbyteorder("="), copy=True)))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptStream(f"malformed stream: {exc}") from exc
    if off != len(data) - 4:
        raise CorruptStream("trailing bytes after tensor data")
    return ParameterSet(tensors, version=pversion)
