"""Differentiable operations over :class:`~refvsr.tensor.Tensor`.

Image ops take and return (n, c, h, w) tensors.  Every op returns a new
tensor; inputs are never mutated.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make

PADDING_MODES = ("zero", "replicate")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    # python scalars adopt the other operand's precision
    if a.data.ndim == 0 and not a.requires_grad:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make(a.data * b.data, (a, b), bw, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(s)
    return make(a.data * s, (a,), lambda g: (g * s,), "scale")


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    k = a.dtype.type(slope)
    out = np.where(pos, a.data, a.data * k)
    return make(out, (a,), lambda g: (np.where(pos, g, g * k),), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1 + np.tanh(0.5 * a.data))
    return make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bw(g):
        return (_unbroadcast(np.where(take_a, g, 0), a.shape) if a.requires_grad else None,
                _unbroadcast(np.where(take_a, 0, g), b.shape) if b.requires_grad else None)

    return make(out, (a, b), bw, "maximum")


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    return make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),), "mean")


# ---------------------------------------------------------------- structural

def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def channels(a, start: int, stop: int) -> Tensor:
    """Slice channels ``start:stop`` of an (n, c, h, w) tensor."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make(a.data[:, start:stop].copy(), (a,), bw, "channels")


def repeat_cells(a, r: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor ``r``."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, r, axis=2), r, axis=3)
    return make(out, (a,), lambda g: (g.reshape(n, c, h, r, w, r).sum(axis=(3, 5)),), "repeat_cells")


def pixel_shuffle(a, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r); channel c*r*r + i*r + j lands at offset (i, j)."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"channel count {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out = a.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def bw(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return make(np.ascontiguousarray(out), (a,), bw, "pixel_shuffle")


def pixel_unshuffle(a, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    a = as_tensor(a)
    n, c, H, W = a.shape
    if r < 1 or H % r or W % r:
        raise ValueError(f"spatial dims {(H, W)} not divisible by r={r}")
    h, w = H // r, W // r
    out = a.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, H, W),)

    return make(np.ascontiguousarray(out), (a,), bw, "pixel_unshuffle")


# ---------------------------------------------------------------- convolution

def pad_array(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Pad the last two axes by ``p`` (zero or edge replication)."""
    if p == 0:
        return x
    if mode not in PADDING_MODES:
        raise ValueError(f"unknown padding policy {mode!r}")
    h, w = x.shape[-2:]
    out = np.empty(x.shape[:-2] + (h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[..., p:p + h, p:p + w] = x
    if mode == "zero":
        out[..., :p, :] = 0
        out[..., p + h:, :] = 0
        out[..., p:p + h, :p] = 0
        out[..., p:p + h, p + w:] = 0
        return out
    out[..., p:p + h, :p] = x[..., :, :1]
    out[..., p:p + h, p + w:] = x[..., :, w - 1:]
    out[..., :p, :] = out[..., p:p + 1, :]
    out[..., p + h:, :] = out[..., p + h - 1:p + h, :]
    return out


def _fold_edges(g: np.ndarray, p: int, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    core = g[p:g.shape[0] - p].copy()
    core[0] += g[:p].sum(axis=0)
    core[-1] += g[g.shape[0] - p:].sum(axis=0)
    return np.moveaxis(core, 0, axis)


def unpad_grad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:-p, p:-p]
    return _fold_edges(_fold_edges(g, p, 2), p, 3)


def _im2col(xp: np.ndarray, k: int, stride: int):
    """(n, c, H, W) padded input -> (n, c*k*k, ho*wo) columns."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def _conv_transpose_grad(g: np.ndarray, kern: np.ndarray, stride: int, padded_shape) -> np.ndarray:
    """Gradient w.r.t. the padded conv input: full correlation with the flipped kernel."""
    n, co, ho, wo = g.shape
    _, ci, k, _ = kern.shape
    if stride > 1:
        gd = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gdp = pad_array(gd, k - 1, "zero")
    cols, hq, wq = _im2col(gdp, k, 1)
    flipped = kern[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
    full = (flipped @ cols).reshape(n, ci, hq, wq)
    Hp, Wp = padded_shape[2], padded_shape[3]
    if (hq, wq) == (Hp, Wp):
        return full
    out = np.zeros((n, ci, Hp, Wp), dtype=g.dtype)
    out[:, :, :hq, :wq] = full
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "zero") -> Tensor:
    """2-D cross-correlation with ``k // 2`` padding on each side.

    ``kernel`` is (c_out, c_in, k, k); ``padding`` is ``"zero"`` or
    ``"replicate"``.  Output size is ``(h + 2*(k//2) - k) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    co, ci, k, k2 = kernel.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding policy {padding!r}")
    p = k // 2
    xp = pad_array(x.data, p, padding)
    cols, ho, wo = _im2col(xp, k, stride)
    wm = kernel.data.reshape(co, -1)
    out = wm @ cols
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(n, co, ho, wo)

    def bw(g):
        gm = g.reshape(n, co, ho * wo)
        gk = (gm @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _conv_transpose_grad(g, kernel.data, stride, xp.shape)
            gx = unpad_grad(gxp, p, padding)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)) if bias.requires_grad else None)
        return tuple(grads)

    return make(out, parents, bw, "conv2d")


@lru_cache(maxsize=None)
def gaussian_kernel3(sigma: float = 1.0) -> np.ndarray:
    """Normalized 3x3 Gaussian weights exp(-(dx^2+dy^2) / (2 sigma^2)) / Z."""
    d = np.arange(-1, 2, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    k /= k.sum()
    k.setflags(write=False)
    return k


def gaussian_blur3(x) -> Tensor:
    """Depthwise 3x3 Gaussian blur (sigma 1.0) with replicate borders."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    kern = gaussian_kernel3(1.0).astype(x.dtype).reshape(1, 1, 3, 3)
    flat = reshape(x, (n * c, 1, h, w))
    return reshape(conv2d(flat, Tensor(kern), padding="replicate"), (n, c, h, w))


# ---------------------------------------------------------------- resampling

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(in_len: int, out_len: int, scale: Fraction) -> np.ndarray:
    """Dense (out_len, in_len) weights of imresize-style antialiased bicubic."""
    s = float(scale)
    width = 4.0
    if s < 1:
        width = 4.0 / s
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / s + 0.5 * (1 - 1 / s)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    if s < 1:
        wts = s * cubic(s * (u[:, None] - idx))
    else:
        wts = cubic(u[:, None] - idx)
    wts /= wts.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.ravel()), wts.ravel())
    mat.setflags(write=False)
    return mat


def _as_scale(scale) -> Fraction:
    fr = Fraction(scale).limit_denominator(1 << 16)
    if fr <= 0:
        raise ValueError(f"resize scale must be positive, got {scale}")
    return fr


def bicubic_resize(x, scale) -> Tensor:
    """Separable cubic (a = -0.5) resize; antialiased when shrinking.

    Output size is ``round(size * scale)``; borders use symmetric mirroring.
    """
    x = as_tensor(x)
    fr = _as_scale(scale)
    n, c, h, w = x.shape
    if fr == 1:
        return make(x.data.copy(), (x,), lambda g: (g,), "bicubic_resize")
    ho, wo = int(round(h * fr)), int(round(w * fr))
    if ho < 1 or wo < 1:
        raise ValueError("resize would produce an empty image")
    mh = resize_matrix(h, ho, fr).astype(x.dtype)
    mw = resize_matrix(w, wo, fr).astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make(out, (x,), bw, "bicubic_resize")


def _sparse_apply(x: np.ndarray, mats) -> np.ndarray:
    n, c = x.shape[:2]
    out = []
    for i in range(n):
        m = mats[i] if isinstance(mats, (list, tuple)) else mats
        out.append(np.asarray(m @ x[i].reshape(c, -1).T).T)
    return np.stack(out)


def linear_map(x, mats, out_hw, op: str = "linear_map", accumulate_dtype=None) -> Tensor:
    """Apply fixed sparse maps (one per batch item, or one shared) over pixels."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    in_shape = x.shape
    acc = accumulate_dtype or x.dtype
    out = _sparse_apply(x.data.astype(acc, copy=False), mats).astype(x.dtype)
    out = out.reshape(n, c, *out_hw)

    def bw(g):
        gm = g.reshape(n, c, -1).astype(acc, copy=False)
        res = []
        for i in range(n):
            m = mats[i] if isinstance(mats, (list, tuple)) else mats
            res.append(np.asarray(m.T @ gm[i].T).T)
        return (np.stack(res).astype(x.dtype).reshape(in_shape),)

    return make(out, (x,), bw, op)


def _bilinear_terms(cx: np.ndarray, cy: np.ndarray, h: int, w: int):
    xs = np.clip(cx, 0, w - 1)
    ys = np.clip(cy, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xs - x0
    wy = ys - y0
    return x0, x1, y0, y1, wx, wy


def bilinear_matrix(cx: np.ndarray, cy: np.ndarray, h: int, w: int) -> sp.csr_matrix:
    """Sparse (len(cx), h*w) matrix sampling at (cx, cy) with border clamp."""
    cx, cy = cx.ravel().astype(np.float64), cy.ravel().astype(np.float64)
    x0, x1, y0, y1, wx, wy = _bilinear_terms(cx, cy, h, w)
    m = cx.size
    rows = np.tile(np.arange(m), 4)
    cols = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    vals = np.concatenate([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, h * w))


def base_grid(h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def bilinear_warp(x, flow) -> Tensor:
    """Backward warp: ``out(p) = x(p + flow(p))`` sampled bilinearly, border clamped.

    ``flow`` is (n, 2, h, w) holding (dx, dy) in pixels and is treated as a
    constant: no gradient flows into it.
    """
    x = as_tensor(x)
    fl = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    n, c, h, w = x.shape
    if fl.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {fl.shape} does not match input {(n, 2, h, w)}")
    gx, gy = base_grid(h, w)
    mats = [bilinear_matrix(gx + fl[i, 0], gy + fl[i, 1], h, w).astype(x.dtype) for i in range(n)]
    return linear_map(x, mats, (h, w), op="bilinear_warp")


def sample_bilinear(x, coords) -> Tensor:
    """Sample ``x`` at absolute pixel positions ``coords`` (n, 2, ho, wo) = (x, y).

    Border-clamped bilinear interpolation, differentiable in both the image
    and (unlike :func:`bilinear_warp`) the coordinates.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    n, c, h, w = x.shape
    if coords.ndim != 4 or coords.shape[:2] != (n, 2):
        raise ValueError(f"coords must be (n, 2, ho, wo), got {coords.shape}")
    ho, wo = coords.shape[2:]
    outs, cache = [], []
    for i in range(n):
        cx = coords.data[i, 0].ravel().astype(np.float64)
        cy = coords.data[i, 1].ravel().astype(np.float64)
        x0, x1, y0, y1, wx, wy = _bilinear_terms(cx, cy, h, w)
        img = x.data[i].reshape(c, -1)
        wx, wy = wx.astype(x.dtype), wy.astype(x.dtype)
        v00, v01 = img[:, y0 * w + x0], img[:, y0 * w + x1]
        v10, v11 = img[:, y1 * w + x0], img[:, y1 * w + x1]
        top = v00 + (v01 - v00) * wx
        bot = v10 + (v11 - v10) * wx
        outs.append(top + (bot - top) * wy)
        cache.append((cx, cy, x0, x1, y0, y1, wx, wy, v00, v01, v10, v11))
    out = np.stack(outs).reshape(n, c, ho, wo).astype(x.dtype)

    def bw(g):
        gx_img = np.zeros((n, c, h * w), dtype=x.dtype) if x.requires_grad else None
        gcoords = np.zeros((n, 2, ho * wo), dtype=coords.dtype) if coords.requires_grad else None
        for i in range(n):
            cx, cy, x0, x1, y0, y1, wx, wy, v00, v01, v10, v11 = cache[i]
            gi = g[i].reshape(c, -1)
            if gx_img is not None:
                m = bilinear_matrix(cx, cy, h, w).astype(x.dtype)
                gx_img[i] = np.asarray(m.T @ gi.T).T
            if gcoords is not None:
                mx = (cx >= 0) & (cx <= w - 1)
                my = (cy >= 0) & (cy <= h - 1)
                dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
                dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
                gcoords[i, 0] = (gi * dx).sum(axis=0) * mx
                gcoords[i, 1] = (gi * dy).sum(axis=0) * my
        return (None if gx_img is None else gx_img.reshape(x.shape).astype(x.dtype),
                None if gcoords is None else gcoords.reshape(coords.shape).astype(coords.dtype))

    return make(out, (x, coords), bw, "sample_bilinear")
