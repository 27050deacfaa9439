"""Training objectives.

``delta_i(X, Y) = min_j D(x_i, y_j)`` with ``D = 1 - cos`` between frozen
encoder features of pixel ``i`` of X and pixel ``j`` of Y.  The min runs
over a candidate set (a 9x9 window around the corresponding position plus
64 strided global positions) unless ``brute_force`` is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .matching import NORM_FLOOR, Encoder, default_encoder, encode, match
from .model import match_batch
from .tensor import Tensor, as_tensor, make, no_grad

log = logging.getLogger(__name__)

CONFIDENCE_SOURCES = ("fresh", "recurrent")


@dataclass
class LossConfig:
    lambda_rec: float = 0.01
    lambda_pre: float = 0.05
    lambda_8k: float = 0.1
    window_k: int = 7
    bandwidth: float = 0.5  # reserved for a soft contextual form; unused by the min form
    neighborhood: int = 9
    global_candidates: int = 64
    brute_force: bool = False
    confidence_source: str = "fresh"

    def __post_init__(self):
        if self.window_k < 1 or self.window_k % 2 == 0:
            raise ValueError(f"window_k must be odd and >= 1, got {self.window_k}")
        for name in ("lambda_rec", "lambda_pre", "lambda_8k"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError("neighborhood must be odd and >= 1")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ValueError(f"confidence_source must be one of {CONFIDENCE_SOURCES}")


def window_indices(t: int, T: int, k: int) -> list:
    """Frame indices of the size-``k`` window centred on ``t``, truncated to [0, T)."""
    r = (k - 1) // 2
    return list(range(max(0, t - r), min(T, t + r + 1)))


@dataclass(frozen=True)
class DistanceMeasure:
    mode: str = "feature-cosine"
    encoder: Encoder | None = None

    def features(self, img) -> Tensor:
        enc = self.encoder or default_encoder()
        img = as_tensor(img)
        return enc(img)


@dataclass
class TargetFeatures:
    """Unit-normalized (n, c, h, w) encoder features of a constant target image."""
    unit: np.ndarray

    @property
    def hw(self):
        return self.unit.shape[2:]


def target_features(Y, D: DistanceMeasure | None = None) -> TargetFeatures:
    if isinstance(Y, TargetFeatures):
        return Y
    D = D or DistanceMeasure()
    Y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    with no_grad():
        f = D.features(Tensor(Y)).data
    f64 = f.astype(np.float64)
    unit = f64 / np.maximum(np.linalg.norm(f64, axis=1, keepdims=True), NORM_FLOOR)
    return TargetFeatures(unit.astype(f.dtype))


@lru_cache(maxsize=64)
def _candidate_layout(h: int, w: int, hy: int, wy: int, neighborhood: int, n_global: int):
    cy = np.clip(np.rint((np.arange(h) + 0.5) * hy / h - 0.5), 0, hy - 1).astype(np.int64)
    cx = np.clip(np.rint((np.arange(w) + 0.5) * wy / w - 0.5), 0, wy - 1).astype(np.int64)
    side = int(round(np.sqrt(n_global)))
    gy = np.unique(np.floor((np.arange(side) + 0.5) * hy / side).astype(np.int64))
    gx = np.unique(np.floor((np.arange(side) + 0.5) * wy / side).astype(np.int64))
    glob = (gy[:, None] * wy + gx[None, :]).ravel()
    return cy, cx, glob


def candidate_indices(h: int, w: int, hy: int, wy: int, neighborhood: int = 9,
                      n_global: int = 64) -> np.ndarray:
    """(h*w, K) flattened Y positions searched for every X pixel, in search order.

    The first ``neighborhood**2`` columns are the window around the
    proportionally mapped position (clamped at the border), the rest are the
    strided global positions.
    """
    cy, cx, glob = _candidate_layout(h, w, hy, wy, neighborhood, n_global)
    r = neighborhood // 2
    off = np.arange(-r, r + 1)
    ny = np.clip(cy[:, None, None, None] + off[None, None, :, None], 0, hy - 1)
    nx = np.clip(cx[None, :, None, None] + off[None, None, None, :], 0, wy - 1)
    local = (ny * wy + nx).reshape(h * w, -1)
    return np.concatenate([local, np.broadcast_to(glob, (h * w, glob.size))], axis=1)


def _as_slice(idx: np.ndarray):
    """A slice equal to ``idx`` when it is an arithmetic progression, else ``idx``."""
    if idx.size > 1:
        step = int(idx[1] - idx[0])
        if step > 0 and np.array_equal(idx, idx[0] + step * np.arange(idx.size)):
            return slice(int(idx[0]), int(idx[-1]) + 1, step)
    elif idx.size == 1:
        return slice(int(idx[0]), int(idx[0]) + 1)
    return idx


def _shift(ix, d: int):
    if isinstance(ix, slice):
        return slice(ix.start + d, ix.stop + d, ix.step)
    return ix + d


def _best_over_candidates(xn, yn, cfg):
    """Max cosine and its flat Y index for every X pixel, first candidate wins ties."""
    c, h, w = xn.shape
    hy, wy = yn.shape[1:]
    cy, cx, glob = _candidate_layout(h, w, hy, wy, cfg.neighborhood, cfg.global_candidates)
    r = cfg.neighborhood // 2
    m = 2 * r + 1
    ypad = ops.pad_array(yn, r, "replicate")
    sims = np.empty((m * m, h, w), dtype=xn.dtype)
    sy, sx = _as_slice(cy), _as_slice(cx)
    for a in range(m):
        rows = ypad[:, _shift(sy, a)]
        for b in range(m):
            np.einsum("chw,chw->hw", xn, rows[:, :, _shift(sx, b)], out=sims[a * m + b])
    k = np.argmax(sims, axis=0)
    best = np.take_along_axis(sims, k[None], axis=0)[0]
    ry = np.clip(cy[:, None] + k // m - r, 0, hy - 1)
    rx = np.clip(cx[None, :] + k % m - r, 0, wy - 1)
    best_j = ry * wy + rx
    gsim = (xn.reshape(c, -1).T @ yn.reshape(c, -1)[:, glob]).reshape(h, w, -1)
    k = np.argmax(gsim, axis=2)
    gbest = np.take_along_axis(gsim, k[..., None], axis=2)[..., 0]
    better = gbest > best
    best = np.where(better, gbest, best)
    best_j = np.where(better, glob[k], best_j)
    return best.ravel(), best_j.ravel()


def _best_brute(xn, yn, chunk=4096):
    c = xn.shape[0]
    xf = xn.reshape(c, -1).T
    yf = yn.reshape(c, -1)
    N = xf.shape[0]
    best = np.empty(N, dtype=xn.dtype)
    best_j = np.empty(N, dtype=np.int64)
    for lo in range(0, N, chunk):
        sims = xf[lo:lo + chunk] @ yf
        j = np.argmax(sims, axis=1)
        best_j[lo:lo + chunk] = j
        best[lo:lo + chunk] = sims[np.arange(len(j)), j]
    return best, best_j


def _nearest_cosine(fx: Tensor, target: TargetFeatures, cfg: LossConfig) -> Tensor:
    """Per-pixel ``1 - max_j cos(x_i, y_j)`` as an (n, 1, h, w) tensor."""
    n, c, h, w = fx.shape
    if target.unit.shape[0] != n:
        raise ValueError(f"batch mismatch: {n} vs {target.unit.shape[0]}")
    dt = fx.dtype
    deltas, cache = [], []
    for b in range(n):
        norms = np.sqrt((fx.data[b] ** 2).sum(axis=0, keepdims=True))
        xn = fx.data[b] / np.maximum(norms, NORM_FLOOR)
        yn = target.unit[b].astype(dt, copy=False)
        if cfg.brute_force:
            best, best_j = _best_brute(xn, yn)
        else:
            best, best_j = _best_over_candidates(xn, yn, cfg)
        deltas.append((1 - best).reshape(1, h, w))
        cache.append((xn, norms, yn.reshape(c, -1)[:, best_j].reshape(c, h, w)))
    out = np.stack(deltas).astype(dt)

    def bw(g):
        gx = np.empty_like(fx.data)
        for b in range(n):
            xn, norms, yb = cache[b]
            proj = (xn * yb).sum(axis=0, keepdims=True)
            big = norms >= NORM_FLOOR
            dx = np.where(big, -(yb - xn * proj) / np.maximum(norms, NORM_FLOOR), -yb / NORM_FLOOR)
            gx[b] = g[b] * dx
        return (gx,)

    return make(out, (fx,), bw, "nearest_cosine")


class SourceFeatures:
    """Encoder features of an image being optimized, computed once and reused."""

    def __init__(self, X, D: DistanceMeasure | None = None):
        self.X = as_tensor(X)
        self.feats = (D or DistanceMeasure()).features(self.X)


def contextual_map(X, Y, D: DistanceMeasure | None = None, cfg: LossConfig | None = None) -> Tensor:
    """Per-pixel contextual distances delta_i(X, Y), shape (n, 1, h, w)."""
    cfg = cfg or LossConfig()
    src = X if isinstance(X, SourceFeatures) else SourceFeatures(X, D)
    target = target_features(Y, D)
    if target.unit.shape[2] * target.unit.shape[3] == 0:
        raise ValueError("empty candidate set")
    return _nearest_cosine(src.feats, target, cfg)


def contextual_distance(X, Y, D: DistanceMeasure | None = None, cfg: LossConfig | None = None) -> Tensor:
    """Sum over pixels of delta_i(X, Y), averaged over the batch."""
    dm = contextual_map(X, Y, D, cfg)
    return ops.scale(ops.sum(dm), 1.0 / dm.shape[0])


def blurred_l1(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ops.mean(ops.abs(ops.sub(ops.gaussian_blur3(a), ops.gaussian_blur3(b))))


def reconstruction_loss(sr, hr, cfg: LossConfig | None = None, D: DistanceMeasure | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    src = sr if isinstance(sr, SourceFeatures) else None
    sr, hr = as_tensor(src.X if src else sr), as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    loss = blurred_l1(sr, hr)
    if cfg.lambda_rec:
        loss = ops.add(loss, ops.scale(contextual_distance(src or sr, hr, D, cfg), cfg.lambda_rec))
    return loss


def upsample_confidence(conf, size) -> np.ndarray:
    """Nearest-neighbour upsampling of (n, 1, h, w) confidences to ``size``, clamped at 0."""
    conf = conf.data if isinstance(conf, Tensor) else np.asarray(conf)
    if conf.ndim == 2:
        conf = conf[None, None]
    h, w = conf.shape[2:]
    H, W = size
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"confidence grid {(h, w)} does not divide image size {(H, W)}")
    r = H // h
    return np.maximum(np.repeat(np.repeat(conf, r, axis=2), r, axis=3), 0)


def multi_ref_fidelity_loss(sr, ref_hr_window, conf_window, cfg: LossConfig | None = None,
                            D: DistanceMeasure | None = None, return_flag: bool = False):
    """Confidence-weighted contextual distance to every Ref frame of the window.

    Returns the loss tensor, or ``(loss, degenerate)`` with ``return_flag``;
    ``degenerate`` is True when the total confidence is zero (loss 0).
    """
    cfg = cfg or LossConfig()
    if len(ref_hr_window) != len(conf_window):
        raise ValueError("ref and confidence windows differ in length")
    if not ref_hr_window:
        raise ValueError("empty reference window")
    if len(ref_hr_window) > cfg.window_k:
        raise ValueError(f"window of {len(ref_hr_window)} frames exceeds k={cfg.window_k}")
    src = sr if isinstance(sr, SourceFeatures) else None
    sr = as_tensor(src.X if src else sr)
    H, W = sr.shape[2:]
    weights = [upsample_confidence(c, (H, W)).astype(sr.dtype) for c in conf_window]
    total = float(sum(wt.sum(dtype=np.float64) for wt in weights))
    if total <= 0:
        log.warning("multi-Ref fidelity: total confidence is zero; returning 0")
        zero = Tensor(np.zeros((), dtype=sr.dtype))
        return (zero, True) if return_flag else zero
    if src is None:
        src = SourceFeatures(sr, D)
    num = None
    for ref, wt in zip(ref_hr_window, weights):
        if not wt.any():
            continue
        term = ops.sum(ops.mul(contextual_map(src, ref, D, cfg), Tensor(wt)))
        num = term if num is None else ops.add(num, term)
    loss = ops.scale(num, 1.0 / total)
    return (loss, False) if return_flag else loss


def pretrain_loss(sr, hr, ref_hr_window, conf_window, cfg: LossConfig | None = None,
                  D: DistanceMeasure | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    if cfg.lambda_rec or cfg.lambda_pre:
        sr = SourceFeatures(sr, D)
    loss = reconstruction_loss(sr, hr, cfg, D)
    if cfg.lambda_pre:
        mfid = multi_ref_fidelity_loss(sr, ref_hr_window, conf_window, cfg, D)
        loss = ops.add(loss, ops.scale(mfid, cfg.lambda_pre))
    return loss


def adaptation_loss(sr, uw, tele_window, conf_window, cfg: LossConfig | None = None,
                    D: DistanceMeasure | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    sr, uw = as_tensor(sr), as_tensor(uw)
    if sr.shape[2] != 4 * uw.shape[2] or sr.shape[3] != 4 * uw.shape[3]:
        raise ValueError(f"SR {sr.shape} is not 4x the ultra-wide frame {uw.shape}")
    loss = blurred_l1(ops.bicubic_resize(sr, 0.25), uw)
    if cfg.lambda_8k:
        mfid = multi_ref_fidelity_loss(sr, tele_window, conf_window, cfg, D)
        loss = ops.add(loss, ops.scale(mfid, cfg.lambda_8k))
    return loss


def window_confidences(lr_t, ref_window, zoom: int, encoder=None) -> list:
    """Fresh matching confidence of LR frame t against every Ref frame of the window."""
    return [match_batch(lr_t, ref, zoom, encoder)[1] for ref in ref_window]


def confidence_table(lr_seq, ref_seq, zoom: int, k: int, encoder=None, budget=None,
                     known: dict | None = None) -> dict:
    """Fresh confidences ``{(t, t'): (n, 1, h, w)}`` for every window pair.

    Each LR and Ref frame is encoded once.  ``known`` may pre-seed pairs
    that were already matched (e.g. ``(t, t)`` from the forward pass).
    """
    T = len(lr_seq)
    if len(ref_seq) != T:
        raise ValueError("LR and Ref sequences differ in length")
    arr = lambda x: x.data if isinstance(x, Tensor) else np.asarray(x)  # noqa: E731
    n = arr(lr_seq[0]).shape[0]
    lr_f = [[encode(arr(x)[i:i + 1], encoder) for i in range(n)] for x in lr_seq]
    ref_f = []
    for x in ref_seq:
        x = arr(x)
        with no_grad():
            down = ops.bicubic_resize(Tensor(x), 1.0 / zoom).data if zoom != 1 else x
        ref_f.append([encode(down[i:i + 1], encoder) for i in range(n)])
    table = dict(known or {})
    for t in range(T):
        for tp in window_indices(t, T, k):
            if (t, tp) in table:
                continue
            confs = [match(lr_f[t][i], ref_f[tp][i], budget)[1] for i in range(n)]
            table[(t, tp)] = np.stack(confs)[:, None].astype(arr(lr_seq[t]).dtype)
    return table


def recurrent_confidences(conf_f: list, conf_b: list) -> list:
    """Per-frame accumulated confidence of the recurrent pipeline (max of both directions)."""
    return [np.maximum(a, b) for a, b in zip(conf_f, conf_b)]
