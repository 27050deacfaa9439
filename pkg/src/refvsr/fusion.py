"""Propagative temporal fusion: confidence-gated fusion and max accumulation."""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Conv, Module
from .tensor import Tensor, as_tensor

GATE_ACTIVATIONS = (None, "sigmoid", "relu")


class FusionParams(Module):
    """Gate conv over confidences and feature conv over [aligned Ref, aggregated].

    The feature conv starts at zero so the fused output equals the
    aggregated features exactly; the gate conv starts random so the product
    has a non-zero gradient from the first step.  ``simplified`` gates on the
    current matching confidence alone (the ablation baseline).
    """

    def __init__(self, ch: int, simplified: bool = False, gate_activation=None, rng=None,
                 dtype=np.float32):
        if gate_activation not in GATE_ACTIVATIONS:
            raise ValueError(f"gate_activation must be one of {GATE_ACTIVATIONS}")
        self.simplified = simplified
        self.gate_activation = gate_activation
        self.gate = Conv(1 if simplified else 2, ch, rng=rng, dtype=dtype)
        self.feat = Conv(2 * ch, ch, rng=rng, init="zero", dtype=dtype)


def warp_confidence(c_prev, flow) -> Tensor:
    """Backward-warp an accumulated confidence map along ``flow``."""
    return ops.bilinear_warp(c_prev, flow)


def accumulate_confidence(c_t, c_warped) -> Tensor:
    c_t, c_warped = as_tensor(c_t), as_tensor(c_warped)
    if c_t.shape != c_warped.shape:
        raise ValueError(f"shape mismatch: {c_t.shape} vs {c_warped.shape}")
    return ops.maximum(c_t, c_warped)


def fuse(h_hat, h_ref_aligned, c_t, c_warped, params: FusionParams) -> Tensor:
    h_hat, h_ref = as_tensor(h_hat), as_tensor(h_ref_aligned)
    c_t, c_warped = as_tensor(c_t), as_tensor(c_warped)
    grid = h_hat.shape[2:]
    for name, t in (("aligned Ref", h_ref), ("c_t", c_t), ("c_warped", c_warped)):
        if t.shape[2:] != grid or t.shape[0] != h_hat.shape[0]:
            raise ValueError(f"{name} grid {t.shape} does not match {h_hat.shape}")
    conf = c_t if params.simplified else ops.concat([c_t, c_warped], axis=1)
    gate = params.gate(conf)
    if params.gate_activation == "sigmoid":
        gate = ops.sigmoid(gate)
    elif params.gate_activation == "relu":
        gate = ops.relu(gate)
    feat = params.feat(ops.concat([h_ref, h_hat], axis=1))
    return ops.add(ops.mul(gate, feat), h_hat)
