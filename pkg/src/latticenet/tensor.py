"""Dense NCHW tensor primitives and binary serialization.

Tensors are plain numpy arrays in row-major NCHW layout, float32 for
training and float64 for gradient verification. No broadcasting: every
elementwise operation demands exact shape equality so wiring bugs fail
loudly instead of silently stretching shapes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LCNT"

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Raised when two tensors that must share a shape do not."""

    def __init__(self, a_shape, b_shape):
        super().__init__(f"shape mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape)


_ZIP_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "absdiff": lambda a, b: np.abs(a - b),
}


def zip_elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise combine two same-shaped tensors; op in {add,sub,mul,absdiff}."""
    if op not in _ZIP_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    _check_same_shape(a, b)
    return _ZIP_OPS[op](a, b)


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return a * a.dtype.type(k)


def accumulate(dst: np.ndarray, src: np.ndarray) -> np.ndarray:
    """In-place dst += src. Caller owns dst exclusively; call order is the
    (fixed) order gradients are produced in, which keeps runs reproducible."""
    _check_same_shape(dst, src)
    dst += src
    return dst


def flat_index(coords, shape) -> int:
    """Row-major (n,c,y,x) -> flat offset; the one true index mapping."""
    idx = 0
    for coord, extent in zip(coords, shape):
        if not 0 <= coord < extent:
            raise IndexError(f"coordinate {coords} out of bounds for shape {tuple(shape)}")
        idx = idx * extent + coord
    return idx


def save_tensor(fh, arr: np.ndarray) -> None:
    """Write one tensor record: magic, u8 rank, LE u32 extents, u8 precision
    code (4 or 8), raw little-endian IEEE-754 payload."""
    if arr.dtype.type not in FLOAT_DTYPES:
        raise TypeError(f"only float32/float64 tensors are serializable, got {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(struct.pack("<B", arr.dtype.itemsize))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    (code,) = struct.unpack("<B", fh.read(1))
    if code == 4:
        dtype = np.dtype("<f4")
    elif code == 8:
        dtype = np.dtype("<f8")
    else:
        raise ValueError(f"bad precision code {code}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(count * code)
    if len(payload) != count * code:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))
