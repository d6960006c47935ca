"""Degraded two-stream dataset construction.

Reads CIFAR-10 binary batches bit-exactly, derives a grayscale stream plus a
Canny edge stream, optionally resizes both, and stores the result in the
"LCDS" container. Every transform here is deterministic: same bytes in,
same bytes out, on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import load_tensor, save_tensor

CIFAR_RECORD = 3073  # 1 label byte + 3*1024 pixel bytes
CONTAINER_MAGIC = b"LCDS"


class CorruptFileError(ValueError):
    pass


@dataclass
class LabeledImage:
    label: int
    pixels: np.ndarray  # (3, 32, 32) uint8, planes R then G then B


@dataclass
class StreamPairSet:
    gray: np.ndarray  # (n, side, side) float32 in [0,1]
    edge: np.ndarray  # (n, side, side) float32 in {0,1}
    labels: np.ndarray  # (n,) int64
    side: int

    def __len__(self):
        return len(self.labels)


def load_cifar_batch(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
        raise CorruptFileError(
            f"{path}: length {len(blob)} is not a positive multiple of {CIFAR_RECORD}"
        )
    records = []
    for r in range(len(blob) // CIFAR_RECORD):
        chunk = blob[r * CIFAR_RECORD : (r + 1) * CIFAR_RECORD]
        label = chunk[0]
        if label > 9:
            raise CorruptFileError(f"{path}: record {r} has label byte {label} > 9")
        pixels = np.frombuffer(chunk, dtype=np.uint8, count=3072, offset=1).reshape(3, 32, 32)
        records.append(LabeledImage(label, pixels))
    return records


def save_cifar_batch(records, path) -> None:
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(bytes([rec.label]))
            fh.write(rec.pixels.tobytes())


def to_grayscale(img: LabeledImage) -> np.ndarray:
    """BT.601 luma scaled to [0,1]; integer accumulation keeps white exactly 1."""
    r, g, b = img.pixels.astype(np.int64)
    return ((299 * r + 587 * g + 114 * b) / 255000.0).astype(np.float64)


_GAUSS_CACHE = {}


def _gaussian5(sigma: float) -> np.ndarray:
    k = _GAUSS_CACHE.get(sigma)
    if k is None:
        ax = np.arange(5, dtype=np.float64) - 2.0
        g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
        k = g / g.sum()
        _GAUSS_CACHE[sigma] = k
    return k


def _filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlation with edge-replicated borders; fixed evaluation order."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i : i + img.shape[0], j : j + img.shape[1]]
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)

# quantized direction -> (forward neighbor offset dy,dx); backward is the negation
_DIR_OFFSETS = {0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1)}


def _quantize_direction(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    ang = np.degrees(np.arctan2(gy, gx))
    ang = np.mod(ang, 180.0)
    q = np.zeros(ang.shape, dtype=np.int32)
    q[(ang >= 22.5) & (ang < 67.5)] = 45
    q[(ang >= 67.5) & (ang < 112.5)] = 90
    q[(ang >= 112.5) & (ang < 157.5)] = 135
    return q


def canny(
    gray: np.ndarray,
    sigma: float = 1.4,
    low: float = 0.1,
    high: float = 0.3,
) -> np.ndarray:
    """Binary edge map in {0,1}.

    Pipeline: 5x5 Gaussian blur -> Sobel gradients -> magnitude normalized by
    its max -> direction quantized to 45-degree bins -> non-maximum
    suppression (strict > against the forward neighbor, >= against the
    backward neighbor) -> double threshold -> hysteresis keeping weak pixels
    8-connected to strong ones. The 1-pixel border is forced to 0.
    """
    h, w = gray.shape
    blurred = _filter2d(gray.astype(np.float64), _gaussian5(sigma))
    gx = _filter2d(blurred, _SOBEL_X)
    gy = _filter2d(blurred, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros((h, w), dtype=np.float32)
    mag /= peak
    direction = _quantize_direction(gx, gy)

    keep = np.zeros((h, w), dtype=bool)
    for d, (dy, dx) in _DIR_OFFSETS.items():
        fwd = np.roll(mag, (-dy, -dx), axis=(0, 1))  # fwd[y,x] == mag[y+dy, x+dx]
        bwd = np.roll(mag, (dy, dx), axis=(0, 1))
        keep |= (direction == d) & (mag > fwd) & (mag >= bwd)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False

    strong = keep & (mag >= high)
    weak = keep & (mag >= low)
    # hysteresis: flood from strong pixels over 8-connected weak pixels
    edges = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    stack.append((ny, nx))
    edges[0, :] = edges[-1, :] = False
    edges[:, 0] = edges[:, -1] = False
    return edges.astype(np.float32)


def resize_bilinear(img: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center mapping; identity when sizes match."""
    h, w = img.shape
    if out_side == h == w:
        return img
    src = np.asarray(img, dtype=np.float64)

    def axis_coords(in_n):
        c = (np.arange(out_side) + 0.5) * (in_n / out_side) - 0.5
        c = np.clip(c, 0.0, in_n - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        frac = c - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def make_stream_pairs(
    records,
    out_side: int = 32,
    sigma: float = 1.4,
    low: float = 0.1,
    high: float = 0.3,
) -> StreamPairSet:
    """Build the grayscale + edge stream pair for a list of CIFAR records."""
    grays, edges, labels = [], [], []
    for rec in records:
        g = to_grayscale(rec)
        e = canny(g, sigma=sigma, low=low, high=high)
        if out_side != g.shape[0]:
            g = resize_bilinear(g, out_side)
            e = (resize_bilinear(e, out_side) >= 0.5).astype(np.float64)
        grays.append(g)
        edges.append(e)
        labels.append(rec.label)
    return StreamPairSet(
        gray=np.asarray(grays, dtype=np.float32),
        edge=np.asarray(edges, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        side=out_side,
    )


def write_container(path, pairs: StreamPairSet) -> None:
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(pairs)))
        fh.write(struct.pack("<I", pairs.side))
        for i in range(len(pairs)):
            fh.write(struct.pack("<B", int(pairs.labels[i])))
            save_tensor(fh, pairs.gray[i])
            save_tensor(fh, pairs.edge[i])


def read_container(path) -> StreamPairSet:
    with open(path, "rb") as fh:
        if fh.read(4) != CONTAINER_MAGIC:
            raise CorruptFileError(f"not an LCDS container: {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        (side,) = struct.unpack("<I", fh.read(4))
        gray = np.empty((count, side, side), dtype=np.float32)
        edge = np.empty((count, side, side), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            (labels[i],) = struct.unpack("<B", fh.read(1))
            gray[i] = load_tensor(fh)
            edge[i] = load_tensor(fh)
    return StreamPairSet(gray, edge, labels, side)
