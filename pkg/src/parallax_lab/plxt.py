"""PLXT tensor container.

Layout: ``b"PLXT"``, u8 dtype code (0 = f32, 1 = f64), u8 ndim, ``ndim``
little-endian u64 extents, then the little-endian row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PLXT"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class PlxtFormatError(ValueError):
    pass


def encode(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    code = _CODE_OF.get(x.dtype.newbyteorder("=")) if x.dtype.kind == "f" else None
    if code is None:
        raise PlxtFormatError(f"unsupported dtype {x.dtype}; PLXT stores f32 or f64")
    if x.ndim > 255:
        raise PlxtFormatError("too many dimensions")
    head = MAGIC + struct.pack("<BB", code, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + np.ascontiguousarray(x, dtype=_CODES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise PlxtFormatError("bad magic bytes")
    if len(buf) < 6:
        raise PlxtFormatError("truncated header")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise PlxtFormatError(f"unknown dtype code {code}")
    off = 6 + 8 * ndim
    if len(buf) < off:
        raise PlxtFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dt = _CODES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != n * dt.itemsize:
        raise PlxtFormatError(f"payload has {len(buf) - off} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode(x))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())

