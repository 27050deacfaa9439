"""Deterministic coarse-to-fine block-matching optical flow.

Returns a per-pixel (dx, dy) field such that ``cur(p) ~ prev(p + flow(p))``,
i.e. the field that :func:`refvsr.ops.bilinear_warp` needs to bring the
previous frame (or state) onto the current one.
"""

from __future__ import annotations

import numpy as np

from .ops import pad_array
from .tensor import Tensor

BLOCK = 8
RADIUS = 4
LEVELS = 3


def _gray(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64).mean(axis=0)


def _half(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _candidates(radius: int):
    d = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # zero displacement first, then by growing magnitude: ties keep the smallest move
    return sorted(d, key=lambda v: (abs(v[0]) + abs(v[1]), v[0], v[1]))


def _block_grid(h: int, w: int, block: int):
    ys = np.arange(0, h, block)
    xs = np.arange(0, w, block)
    return ys, xs


def _match_level(cur, prev, guess, block, radius):
    """Integer block search around ``guess`` (nby, nbx, 2) = (dy, dx)."""
    h, w = cur.shape
    ys, xs = _block_grid(h, w, block)
    oy, ox = np.meshgrid(np.arange(block), np.arange(block), indexing="ij")
    py = ys[:, None, None, None] + oy[None, None]          # (nby, 1, b, b)
    px = xs[None, :, None, None] + ox[None, None]          # (1, nbx, b, b)
    valid = (py < h) & (px < w)
    py_c, px_c = np.minimum(py, h - 1), np.minimum(px, w - 1)
    ref = cur[py_c, px_c]
    best = np.full((len(ys), len(xs)), np.inf)
    best_d = np.zeros((len(ys), len(xs), 2), dtype=np.int64)
    pad = radius + int(np.abs(guess).max(initial=0)) + block
    prev_p = pad_array(prev, pad, "replicate").ravel()
    wp = w + 2 * pad
    gy = guess[..., 0][:, :, None, None]
    gx = guess[..., 1][:, :, None, None]
    base = (py_c + gy + pad) * wp + (px_c + gx + pad)
    for dy, dx in _candidates(radius):
        cost = (((ref - prev_p[base + (dy * wp + dx)]) ** 2) * valid).sum(axis=(2, 3))
        better = cost < best
        best = np.where(better, cost, best)
        best_d[better] = guess[better] + (dy, dx)
    return best_d


def _dense(block_flow, h, w, block):
    """Bilinearly interpolate block-centre flow to every pixel (edge-constant)."""
    ys, xs = _block_grid(h, w, block)
    cy = ys + (np.minimum(ys + block, h) - ys - 1) / 2.0
    cx = xs + (np.minimum(xs + block, w) - xs - 1) / 2.0
    out = np.zeros((2, h, w))
    for k in range(2):
        f = block_flow[..., k].astype(np.float64)
        cols = np.stack([np.interp(np.arange(h), cy, f[:, j]) for j in range(f.shape[1])], axis=1)
        out[k] = np.stack([np.interp(np.arange(w), cx, cols[i]) for i in range(h)])
    return out  # (dy, dx)


def _flow_single(cur: np.ndarray, prev: np.ndarray, block: int, radius: int, levels: int):
    a, b = _gray(cur), _gray(prev)
    h, w = a.shape
    if h < block or w < block:
        raise ValueError(f"frame {(h, w)} smaller than one {block}x{block} block")
    pyr = [(a, b)]
    while len(pyr) < levels and min(pyr[-1][0].shape) // 2 >= block:
        pyr.append((_half(pyr[-1][0]), _half(pyr[-1][1])))
    dense = None
    for lvl in range(len(pyr) - 1, -1, -1):
        ca, cb = pyr[lvl]
        lh, lw = ca.shape
        ys, xs = _block_grid(lh, lw, block)
        if dense is None:
            guess = np.zeros((len(ys), len(xs), 2), dtype=np.int64)
        else:
            up = _upsample_flow(dense, lh, lw)
            cyi = np.minimum(ys + block // 2, lh - 1)
            cxi = np.minimum(xs + block // 2, lw - 1)
            guess = np.rint(up[:, cyi][:, :, cxi]).astype(np.int64).transpose(1, 2, 0)
        bf = _match_level(ca, cb, guess, block, radius)
        dense = _dense(bf, lh, lw, block)
    return np.stack([dense[1], dense[0]])  # (dx, dy)


def _upsample_flow(dense, h, w):
    """Bilinear 2x upsampling of a (2, h', w') field with values doubled."""
    _, hs, ws = dense.shape
    yy = np.clip((np.arange(h) + 0.5) / 2 - 0.5, 0, hs - 1)
    xx = np.clip((np.arange(w) + 0.5) / 2 - 0.5, 0, ws - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1, x1 = np.minimum(y0 + 1, hs - 1), np.minimum(x0 + 1, ws - 1)
    wy, wx = (yy - y0)[:, None], (xx - x0)[None, :]
    out = np.empty((2, h, w))
    for k in range(2):
        f = dense[k]
        top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
        bot = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
        out[k] = 2.0 * (top * (1 - wy) + bot * wy)
    return out


def estimate_flow(cur, prev, block: int = BLOCK, radius: int = RADIUS, levels: int = LEVELS) -> np.ndarray:
    """Flow (n, 2, h, w) aligning ``prev`` to ``cur`` for (n, 3, h, w) frames."""
    cur = cur.data if isinstance(cur, Tensor) else np.asarray(cur)
    prev = prev.data if isinstance(prev, Tensor) else np.asarray(prev)
    if cur.shape != prev.shape:
        raise ValueError(f"frame shapes differ: {cur.shape} vs {prev.shape}")
    if cur.ndim == 3:
        return _flow_single(cur, prev, block, radius, levels)[None].astype(np.float32)
    out = [_flow_single(cur[i], prev[i], block, radius, levels) for i in range(cur.shape[0])]
    return np.stack(out).astype(np.float32)
