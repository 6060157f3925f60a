"""FVT1 binary tensor files.

Layout: 4 magic bytes ``F V T 1``, 1 byte dtype code (0 = float32,
1 = float64), 1 byte ndim, then ndim little-endian uint64 dimensions,
then the payload little-endian with the last dimension fastest-varying.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FVT1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FvtError(IOError):
    """Raised for malformed or truncated FVT1 files."""


def write_fvt(path, array: np.ndarray) -> None:
    """Write an array as FVT1. dtype must be float32 or float64."""
    array = np.asarray(array)
    code = _CODE_FOR_KIND.get(np.dtype(array.dtype))
    if code is None:
        raise FvtError(f"unsupported dtype {array.dtype}; use float32 or float64")
    if array.ndim > 255:
        raise FvtError("too many dimensions for FVT1")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", code, array.ndim))
        for dim in array.shape:
            f.write(struct.pack("<Q", dim))
        f.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes())


def read_fvt(path) -> np.ndarray:
    """Read an FVT1 file back into an array of its stored dtype."""
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != MAGIC:
        raise FvtError(f"{path}: not an FVT1 file")
    code, ndim = data[4], data[5]
    if code not in _DTYPE_CODES:
        raise FvtError(f"{path}: unknown dtype code {code}")
    header_end = 6 + 8 * ndim
    if len(data) < header_end:
        raise FvtError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}Q", data[6:header_end]) if ndim else ()
    dtype = _DTYPE_CODES[code]
    count = 1
    for dim in shape:
        count *= dim
    expected = header_end + count * dtype.itemsize
    if len(data) != expected:
        raise FvtError(f"{path}: payload is {len(data) - header_end} bytes, "
                       f"expected {count * dtype.itemsize}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header_end).reshape(shape).copy()
