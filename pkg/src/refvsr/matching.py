"""Global cosine-similarity patch correspondence between LR and Ref features.

Similarities between L2-normalized 3x3 feature patches are evaluated in
row tiles whose size is derived from a byte budget, so the full
(LR patches x Ref patches) matrix never has to exist at once.  Each block
is computed in float64 and rounded to float32 before the argmax, which
makes the result independent of how rows are grouped into tiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv, Module
from .tensor import Tensor, as_tensor, no_grad

ENCODER_CHANNELS = 16
ENCODER_SEED = 20220601
NORM_FLOOR = 1e-8

# instrumentation for tests and the self-test suite
stats = {"peak_block_bytes": 0, "blocks": 0}

# fault-injection hook: "first" (contract) or "last" occurrence wins on ties
_tie_rule = "first"


def reset_stats() -> None:
    stats["peak_block_bytes"] = 0
    stats["blocks"] = 0


def set_tie_rule(rule: str) -> None:
    global _tie_rule
    if rule not in ("first", "last"):
        raise ValueError(rule)
    _tie_rule = rule


class Encoder(Module):
    """Frozen two-layer conv stack: 3 -> 16 -> 16, 3x3, leaky ReLU 0.1."""

    def __init__(self, seed: int = ENCODER_SEED, bias: bool = True, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv(3, ENCODER_CHANNELS, padding="replicate", rng=rng, init="orthogonal",
                          bias=bias, trainable=False, dtype=dtype)
        self.conv2 = Conv(ENCODER_CHANNELS, ENCODER_CHANNELS, padding="replicate", rng=rng,
                          init="orthogonal", bias=bias, trainable=False, dtype=dtype)
        if bias:
            self.conv1.bias.data = rng.uniform(-0.1, 0.1, ENCODER_CHANNELS).astype(dtype)
            self.conv2.bias.data = rng.uniform(-0.1, 0.1, ENCODER_CHANNELS).astype(dtype)

    def __call__(self, x):
        return ops.leaky_relu(self.conv2(ops.leaky_relu(self.conv1(x), 0.1)), 0.1)


_default_encoder = None


def default_encoder() -> Encoder:
    global _default_encoder
    if _default_encoder is None:
        _default_encoder = Encoder()
    return _default_encoder


@dataclass
class FeatureMap:
    tensor: np.ndarray  # (1, c_f, h_f, w_f)
    source_scale: float = 1.0

    @property
    def grid(self):
        return self.tensor.shape[2], self.tensor.shape[3]


@dataclass(frozen=True)
class TileBudget:
    max_bytes: int = 64 << 20

    def rows_per_tile(self, row_width: int, n_ref: int, itemsize: int = 8) -> int:
        rows = self.max_bytes // (row_width * n_ref * itemsize)
        if rows < 1:
            raise ValueError(f"tile budget {self.max_bytes} B cannot hold one row "
                             f"({row_width * n_ref * itemsize} B)")
        return int(rows)


def encode(frame, encoder: Encoder | None = None, source_scale: float = 1.0) -> FeatureMap:
    """Frozen-encoder features of a (1, 3, h, w) image in [0, 1]."""
    frame = as_tensor(frame)
    if frame.ndim != 4 or frame.shape[1] != 3:
        raise ValueError(f"encode expects a (n, 3, h, w) image, got {frame.shape}")
    enc = encoder or default_encoder()
    with no_grad():
        feats = enc(Tensor(frame.data.astype(enc.conv1.weight.dtype)))
    return FeatureMap(feats.data, source_scale)


def normalized_patches(feat: np.ndarray) -> np.ndarray:
    """(c, h, w) -> (h*w, 9c) float64 unit vectors of replicate-padded 3x3 patches."""
    c, h, w = feat.shape
    padded = ops.pad_array(feat.astype(np.float64), 1, "replicate")
    cols = [padded[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    pat = np.stack(cols, axis=1).reshape(c * 9, h * w).T
    norms = np.maximum(np.linalg.norm(pat, axis=1, keepdims=True), NORM_FLOOR)
    return pat / norms


def _argmax(block: np.ndarray) -> np.ndarray:
    if _tie_rule == "first":
        return np.argmax(block, axis=1)
    return block.shape[1] - 1 - np.argmax(block[:, ::-1], axis=1)


def _unwrap(fm) -> np.ndarray:
    arr = fm.tensor if isinstance(fm, FeatureMap) else np.asarray(fm)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("feature maps must have batch size 1")
        arr = arr[0]
    return arr


def match(lr, ref_down, budget: TileBudget | None = None):
    """Best Ref patch index and cosine confidence for every LR patch.

    Returns ``(indices (h, w) int64, confidence (h, w) float32)``.  Indices
    are flattened positions on the Ref grid; ties go to the smallest index.
    """
    a, b = _unwrap(lr), _unwrap(ref_down)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}")
    budget = budget or TileBudget()
    _, h, w = a.shape
    pa, pb = normalized_patches(a), normalized_patches(b)
    n_ref = pb.shape[0]
    rows = budget.rows_per_tile(w, n_ref)
    pbt = np.ascontiguousarray(pb.T)
    idx = np.empty(h * w, dtype=np.int64)
    conf = np.empty(h * w, dtype=np.float32)
    for r0 in range(0, h, rows):
        lo, hi = r0 * w, min(h, r0 + rows) * w
        block = (pa[lo:hi] @ pbt).astype(np.float32)
        stats["blocks"] += 1
        stats["peak_block_bytes"] = max(stats["peak_block_bytes"], (hi - lo) * n_ref * 8)
        best = _argmax(block)
        idx[lo:hi] = best
        conf[lo:hi] = block[np.arange(hi - lo), best]
    return idx.reshape(h, w), conf.reshape(h, w)


ORACLE_CAP = 256 * 256


def brute_force_match(lr, ref_down, cap: int = ORACLE_CAP):
    """Literal double loop over all (LR patch, Ref patch) pairs."""
    a, b = _unwrap(lr), _unwrap(ref_down)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}")
    c, ha, wa = a.shape
    _, hb, wb = b.shape
    if ha * wa * hb * wb > cap:
        raise ValueError(f"instance of {ha * wa}x{hb * wb} pairs exceeds oracle cap {cap}")

    def patch(f, y, x, h, w):
        vec = []
        for ch in range(c):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    vec.append(float(f[ch, yy, xx]))
        v = np.array(vec)
        return v / max(float(np.sqrt((v * v).sum())), NORM_FLOOR)

    pa = [patch(a, y, x, ha, wa) for y in range(ha) for x in range(wa)]
    pb = [patch(b, y, x, hb, wb) for y in range(hb) for x in range(wb)]
    idx = np.zeros(ha * wa, dtype=np.int64)
    conf = np.zeros(ha * wa, dtype=np.float32)
    for i, va in enumerate(pa):
        best_j, best = 0, None
        for j, vb in enumerate(pb):
            s = np.float32(np.dot(va, vb))
            if best is None or s > best:
                best_j, best = j, s
        idx[i], conf[i] = best_j, best
    return idx.reshape(ha, wa), conf.reshape(ha, wa)


def match_frames(lr_img, ref_img, zoom: int, encoder: Encoder | None = None,
                 budget: TileBudget | None = None):
    """Match a (1, 3, h, w) LR frame against a Ref frame downscaled by ``zoom``."""
    lr_img = lr_img.data if isinstance(lr_img, Tensor) else np.asarray(lr_img)
    ref_img = ref_img.data if isinstance(ref_img, Tensor) else np.asarray(ref_img)
    with no_grad():
        ref_down = ops.bicubic_resize(Tensor(ref_img), 1.0 / zoom).data if zoom != 1 else ref_img
    return match(encode(lr_img, encoder), encode(ref_down, encoder, source_scale=1.0 / zoom), budget)
