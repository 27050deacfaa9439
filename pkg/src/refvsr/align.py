"""Reference alignment: stride-matched Ref features, index-map patch warping,
and patch-wise affine correction."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import ops
from .nn import Conv, Module
from .tensor import Tensor, as_tensor

AFFINE_LINEAR_RANGE = 0.2
AFFINE_SHIFT_RANGE = 0.5


class RefFeatureExtractor(Module):
    """conv 3->c (stride 1) then log2(zoom) stride-2 convs, replicate borders."""

    def __init__(self, ch: int, zoom: int, rng=None, bias: bool = True, dtype=np.float32):
        if zoom not in (2, 4):
            raise ValueError(f"unsupported zoom {zoom}; expected 2 or 4")
        self.zoom = zoom
        self.head = Conv(3, ch, padding="replicate", rng=rng, bias=bias, dtype=dtype)
        self.down = [Conv(ch, ch, stride=2, padding="replicate", rng=rng, bias=bias, dtype=dtype)
                     for _ in range(int(np.log2(zoom)))]

    def __call__(self, ref):
        x = ops.leaky_relu(self.head(ref), 0.1)
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i < len(self.down) - 1:
                x = ops.leaky_relu(x, 0.1)
        return x


def extract_ref_features(ref, zoom: int, extractor: RefFeatureExtractor) -> Tensor:
    if zoom != extractor.zoom:
        raise ValueError(f"extractor built for zoom {extractor.zoom}, got {zoom}")
    return extractor(ref)


def _patch_layout(h: int, w: int):
    """Cell (y, x) and 3x3 offset (oy, ox) for every position of the (3h, 3w) layout."""
    Y, X = np.meshgrid(np.arange(3 * h), np.arange(3 * w), indexing="ij")
    return Y // 3, X // 3, Y % 3 - 1, X % 3 - 1


@lru_cache(maxsize=64)
def fold_matrix(h: int, w: int) -> sp.csr_matrix:
    """(h*w, 9*h*w) map averaging every patch sample that lands on a grid cell."""
    cy, cx, oy, ox = _patch_layout(h, w)
    ty, tx = cy + oy, cx + ox
    ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    dst = (ty * w + tx)[ok]
    src = np.arange(9 * h * w).reshape(3 * h, 3 * w)[ok]
    count = np.bincount(dst, minlength=h * w).astype(np.float64)
    m = sp.csr_matrix((1.0 / count[dst], (dst, src)), shape=(h * w, 9 * h * w))
    return m


def fold_patches(samples) -> Tensor:
    """(n, c, 3h, 3w) patch layout -> (n, c, h, w) overlap average."""
    samples = as_tensor(samples)
    n, c, H, W = samples.shape
    h, w = H // 3, W // 3
    return ops.linear_map(samples, fold_matrix(h, w), (h, w), op="fold_patches",
                          accumulate_dtype=np.float64)


def _index_matrix(p: np.ndarray, hr: int, wr: int) -> sp.csr_matrix:
    h, w = p.shape
    cy, cx, oy, ox = _patch_layout(h, w)
    py, px = np.divmod(p[cy, cx], wr)
    sy = np.clip(py + oy, 0, hr - 1)
    sx = np.clip(px + ox, 0, wr - 1)
    gather = sp.csr_matrix((np.ones(9 * h * w), (np.arange(9 * h * w), (sy * wr + sx).ravel())),
                           shape=(9 * h * w, hr * wr))
    return (fold_matrix(h, w) @ gather).tocsr()


def warp_by_index(ref_feats, p) -> Tensor:
    """Place the 3x3 Ref patch centred at ``p[i]`` around every output cell ``i``.

    ``p`` is (h, w) or (n, h, w) of flattened Ref-grid indices; overlapping
    contributions are averaged by their count.
    """
    ref_feats = as_tensor(ref_feats)
    n, c, hr, wr = ref_feats.shape
    p = np.asarray(p)
    if p.ndim == 2:
        p = np.broadcast_to(p, (n,) + p.shape)
    if p.shape[0] != n:
        raise ValueError("index map batch does not match features")
    if p.min() < 0 or p.max() >= hr * wr:
        raise ValueError(f"patch index out of range [0, {hr * wr})")
    mats = [_index_matrix(p[i], hr, wr) for i in range(n)]
    return ops.linear_map(ref_feats, mats, p.shape[1:], op="warp_by_index",
                          accumulate_dtype=np.float64)


class AffineHead(Module):
    """Predicts 6 raw affine parameters per cell; last conv starts at zero (identity)."""

    def __init__(self, cin: int, ch: int, rng=None, dtype=np.float32):
        self.conv1 = Conv(cin, ch, rng=rng, dtype=dtype)
        self.conv2 = Conv(ch, 6, rng=rng, init="zero", dtype=dtype)

    def __call__(self, x):
        return self.conv2(ops.leaky_relu(self.conv1(x), 0.1))


def squash_affine(raw) -> Tensor:
    """Raw head output -> residual [a11-1, a12, a21, a22-1, tx, ty] in the allowed ranges."""
    lin = ops.scale(ops.tanh(ops.channels(raw, 0, 4)), AFFINE_LINEAR_RANGE)
    shift = ops.scale(ops.tanh(ops.channels(raw, 4, 6)), AFFINE_SHIFT_RANGE)
    return ops.concat([lin, shift], axis=1)


def affine_resample(coarse, residual) -> Tensor:
    """Resample every 3x3 patch of ``coarse`` through its own affine map.

    ``residual`` is (n, 6, h, w): the 2x2 linear part minus identity followed
    by the translation.  Patch sample at offset o of cell p is taken at
    ``p + (I + R) o + t`` (bilinear, border clamp) and the resampled patches
    are overlap-averaged back onto the grid.
    """
    coarse, residual = as_tensor(coarse), as_tensor(residual)
    n, c, h, w = coarse.shape
    if residual.shape != (n, 6, h, w):
        raise ValueError(f"affine parameters {residual.shape} do not match grid {(n, 6, h, w)}")
    cy, cx, oy, ox = _patch_layout(h, w)
    dt = coarse.dtype
    ox_t = Tensor(ox[None, None].astype(dt))
    oy_t = Tensor(oy[None, None].astype(dt))
    base_x = Tensor((cx + ox)[None, None].astype(dt))
    base_y = Tensor((cy + oy)[None, None].astype(dt))
    r = ops.repeat_cells(residual, 3)
    sx = base_x + ops.channels(r, 0, 1) * ox_t + ops.channels(r, 1, 2) * oy_t + ops.channels(r, 4, 5)
    sy = base_y + ops.channels(r, 2, 3) * ox_t + ops.channels(r, 3, 4) * oy_t + ops.channels(r, 5, 6)
    coords = ops.concat([sx, sy], axis=1)
    return fold_patches(ops.sample_bilinear(coarse, coords))


def affine_correct(coarse, lr_feats, head: AffineHead) -> Tensor:
    coarse, lr_feats = as_tensor(coarse), as_tensor(lr_feats)
    if coarse.shape[0] != lr_feats.shape[0] or coarse.shape[2:] != lr_feats.shape[2:]:
        raise ValueError(f"grid mismatch: {coarse.shape} vs {lr_feats.shape}")
    raw = head(ops.concat([coarse, lr_feats], axis=1))
    return affine_resample(coarse, squash_affine(raw))
