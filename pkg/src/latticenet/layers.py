"""Forward/backward passes for every layer kind in the architecture notation.

All functions are pure: they take tensors in, return tensors (and whatever
cache the matching backward needs) out. Convolution is cross-correlation
(no kernel flip), lowered to a single GEMM per layer via im2col.

Public conv/pool entry points speak NCHW. Internally feature maps are held
in CHWN (batch innermost) so the im2col slice copies move long contiguous
runs; the network graph calls the ``*_chwn`` variants directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatchError


class ConfigError(ValueError):
    """Layer geometry that cannot produce a valid output."""


def conv_out_size(in_side: int, f: int, s: int, p: int) -> int:
    return (in_side + 2 * p - f) // s + 1


@dataclass
class ConvParams:
    weights: np.ndarray  # (d, in_channels, f, f)
    bias: np.ndarray  # (d,)
    stride: int
    pad: int

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


def to_chwn(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 2, 3, 0))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2))


def _im2col_chwn(x: np.ndarray, f: int, s: int, p: int):
    """(c,h,w,n) -> cols (c*f*f, h_out*w_out*n); 1x1/s1/p0 is a free reshape."""
    c, h, w, n = x.shape
    h_out = (h + 2 * p - f) // s + 1
    w_out = (w + 2 * p - f) // s + 1
    if f == 1 and s == 1 and p == 0:
        return x.reshape(c, h * w * n), h_out, w_out
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p > 0 else x
    cols = np.empty((c * f * f, h_out * w_out * n), dtype=x.dtype)
    cv = cols.reshape(c, f, f, h_out, w_out, n)
    for i in range(f):
        for j in range(f):
            cv[:, i, j] = xp[:, i : i + s * h_out : s, j : j + s * w_out : s]
    return cols, h_out, w_out


def _col2im_chwn(dcols: np.ndarray, x_shape, f: int, s: int, p: int) -> np.ndarray:
    c, h, w, n = x_shape
    h_out = (h + 2 * p - f) // s + 1
    w_out = (w + 2 * p - f) // s + 1
    if f == 1 and s == 1 and p == 0:
        return dcols.reshape(c, h, w, n).copy()
    dpad = np.zeros((c, h + 2 * p, w + 2 * p, n), dtype=dcols.dtype)
    dwin = dcols.reshape(c, f, f, h_out, w_out, n)
    for i in range(f):
        for j in range(f):
            dpad[:, i : i + s * h_out : s, j : j + s * w_out : s] += dwin[:, i, j]
    if p > 0:
        return dpad[:, p : p + h, p : p + w, :]
    return dpad


def conv2d_forward_chwn(x: np.ndarray, params: ConvParams) -> np.ndarray:
    c, h, w, n = x.shape
    d, c_in, f, _ = params.weights.shape
    if c != c_in:
        raise ShapeMismatchError(x.shape, params.weights.shape)
    s, p = params.stride, params.pad
    h_out = conv_out_size(h, f, s, p)
    w_out = conv_out_size(w, f, s, p)
    if h_out < 1 or w_out < 1:
        raise ConfigError(
            f"conv output size {h_out}x{w_out} < 1 for input {h}x{w}, f={f}, s={s}, p={p}"
        )
    cols, h_out, w_out = _im2col_chwn(x, f, s, p)
    y = params.weights.reshape(d, -1) @ cols
    y += params.bias[:, None]
    return y.reshape(d, h_out, w_out, n)


def conv2d_backward_chwn(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray, need_grad_x: bool = True
):
    c, h, w, n = x.shape
    d, _, f, _ = params.weights.shape
    s, p = params.stride, params.pad
    h_out = conv_out_size(h, f, s, p)
    w_out = conv_out_size(w, f, s, p)
    if grad_out.shape != (d, h_out, w_out, n):
        raise ShapeMismatchError(grad_out.shape, (d, h_out, w_out, n))
    cols, _, _ = _im2col_chwn(x, f, s, p)
    g = grad_out.reshape(d, h_out * w_out * n)
    grad_w = (g @ cols.T).reshape(params.weights.shape)
    grad_b = g.sum(axis=1)
    if not need_grad_x:
        return None, grad_w, grad_b
    dcols = np.ascontiguousarray(params.weights.reshape(d, -1).T) @ g
    grad_x = _col2im_chwn(dcols, x.shape, f, s, p)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """NCHW convolution: cross-correlation plus bias."""
    return to_nchw(conv2d_forward_chwn(to_chwn(x), params))


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    gx, gw, gb = conv2d_backward_chwn(to_chwn(x), params, to_chwn(grad_out))
    return to_nchw(gx), gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 defined as 0
    return np.where(x > 0, grad_out, 0)


def maxpool_forward_chwn(x: np.ndarray, s: int):
    """Non-overlapping s x s max pooling on (c,h,w,n); window == stride.

    Returns (pooled, argmax) with argmax in 0..s*s-1 per output cell, first
    maximum in row-major window scan order on ties.
    """
    c, h, w, n = x.shape
    if h % s != 0 or w % s != 0:
        raise ConfigError(f"pool stride {s} does not divide spatial extent {h}x{w}")
    h_out, w_out = h // s, w // s
    stack = np.empty((s * s, c, h_out, w_out, n), dtype=x.dtype)
    for dy in range(s):
        for dx in range(s):
            stack[dy * s + dx] = x[:, dy::s, dx::s]
    idx = stack.argmax(axis=0)
    pooled = stack.max(axis=0)
    return pooled, idx


def maxpool_backward_chwn(idx: np.ndarray, grad_out: np.ndarray, s: int) -> np.ndarray:
    if idx.shape != grad_out.shape:
        raise ShapeMismatchError(idx.shape, grad_out.shape)
    c, h_out, w_out, n = grad_out.shape
    dx_full = np.zeros((c, h_out * s, w_out * s, n), dtype=grad_out.dtype)
    for dy in range(s):
        for dx in range(s):
            k = dy * s + dx
            dx_full[:, dy::s, dx::s] = np.where(idx == k, grad_out, 0)
    return dx_full


def maxpool_forward_fast_chwn(x: np.ndarray, s: int) -> np.ndarray:
    """Pooled maximum only; backward recomputes the winner mask from (x, pooled).

    Same first-maximum tie-break as the argmax variant.
    """
    c, h, w, n = x.shape
    if h % s != 0 or w % s != 0:
        raise ConfigError(f"pool stride {s} does not divide spatial extent {h}x{w}")
    pooled = x[:, 0::s, 0::s]
    for dy in range(s):
        for dx in range(s):
            if dy == 0 and dx == 0:
                continue
            pooled = np.maximum(pooled, x[:, dy::s, dx::s])
    return pooled


def maxpool_backward_fast_chwn(
    x: np.ndarray, pooled: np.ndarray, grad_out: np.ndarray, s: int
) -> np.ndarray:
    if pooled.shape != grad_out.shape:
        raise ShapeMismatchError(pooled.shape, grad_out.shape)
    dx_full = np.zeros_like(x)
    taken = np.zeros(pooled.shape, dtype=bool)
    for dy in range(s):
        for dx in range(s):
            sel = (x[:, dy::s, dx::s] == pooled) & ~taken
            dx_full[:, dy::s, dx::s] = np.where(sel, grad_out, 0)
            taken |= sel
    return dx_full


def maxpool_forward(x: np.ndarray, s: int):
    pooled, idx = maxpool_forward_chwn(to_chwn(x), s)
    return to_nchw(pooled), idx


def maxpool_backward(idx: np.ndarray, grad_out: np.ndarray, s: int) -> np.ndarray:
    return to_nchw(maxpool_backward_chwn(idx, to_chwn(grad_out), s))


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(x.shape, w.shape)
    return x @ w.T + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def dropout_mask(shape, rate: float, seed: int, layer_index: int, step: int) -> np.ndarray:
    """Inverted-dropout mask, a pure function of (seed, layer index, step)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, layer_index, step]))
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_forward(
    x: np.ndarray,
    rate: float,
    training: bool,
    seed: int = 0,
    layer_index: int = 0,
    step: int = 0,
):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    mask = dropout_mask(x.shape, rate, seed, layer_index, step).astype(x.dtype)
    return x * mask, mask


def dropout_backward(mask, grad_out: np.ndarray) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus gradient w.r.t. logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range 0..{k - 1}")
    p = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], eps)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad
