"""Little-endian binary serialization for dense arrays.

Record layout: magic ``TNSR``, u32 rank, u64 extents (one per axis), u8 dtype
code, then the raw C-order data. Records are self-describing, so files may
hold several back to back (dataset samples store image + label that way).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TNSR"

_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "<i8"}
_CODE_FOR_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


class FormatError(ValueError):
    pass


def write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _CODE_FOR_KIND.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(struct.pack("<B", code))
    fh.write(arr.astype(_DTYPE_CODES[code]).tobytes(order="C"))


def read_array(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    (code,) = struct.unpack("<B", fh.read(1))
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code])
    count = int(np.prod(shape)) if shape else 1
    data = fh.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise FormatError("truncated tensor record")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_arrays(path, arrays) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_array(fh, arr)


def load_arrays(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            out.append(read_array(_Chained(head, fh)))
    return out


class _Chained:
    """File-like that replays a prefix before the underlying stream."""

    def __init__(self, prefix: bytes, fh):
        self._prefix = prefix
        self._fh = fh

    def read(self, n: int) -> bytes:
        if self._prefix:
            take, self._prefix = self._prefix[:n], self._prefix[n:]
            if len(take) < n:
                take += self._fh.read(n - len(take))
            return take
        return self._fh.read(n)
