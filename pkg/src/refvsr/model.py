"""Bidirectional recurrent RefVSR network.

Each direction runs a recurrent cell per frame: flow to the previous frame,
warp of the propagated state, LR aggregation through residual blocks,
Ref matching + alignment + confidence-gated fusion, and max accumulation
of the matching confidence.  The upsampler combines both directions and
adds a bicubic 4x skip of the LR frame.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .align import AffineHead, RefFeatureExtractor, affine_correct, warp_by_index
from .flow import estimate_flow
from .fusion import FusionParams, accumulate_confidence, fuse, warp_confidence
from .matching import Encoder, TileBudget, default_encoder, match_frames
from .nn import Conv, Module, ResBlock
from .tensor import Tensor, as_tensor

SCALE = 4


@dataclass
class ModelConfig:
    channels: int = 32
    zoom: int = 2
    simplified_fusion: bool = False
    gate_activation: str | None = None
    num_blocks: int = 2
    init_confidence: float = 0.0
    seed: int = 0

    @classmethod
    def small(cls, **kw):
        return cls(channels=16, **kw)

    def to_dict(self):
        return asdict(self)


@dataclass
class CellState:
    h: Tensor
    c: Tensor

    @property
    def grid(self):
        return self.h.shape[2:]


@dataclass
class SequenceResult:
    sr_frames: list
    conf_f: list = field(default_factory=list)
    conf_b: list = field(default_factory=list)
    match_conf: list = field(default_factory=list)


class RecurrentCell(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.channels
        self.aggregate = Conv(3 + ch, ch, rng=rng)
        self.res = [ResBlock(ch, rng=rng) for _ in range(cfg.num_blocks)]
        self.ref_extract = RefFeatureExtractor(ch, cfg.zoom, rng=rng)
        self.align_head = AffineHead(2 * ch, ch, rng=rng)
        self.fusion = FusionParams(ch, simplified=cfg.simplified_fusion,
                                   gate_activation=cfg.gate_activation, rng=rng)

    def aggregate_lr(self, lr_cur, h_warped):
        x = ops.leaky_relu(self.aggregate(ops.concat([lr_cur, h_warped], axis=1)), 0.1)
        for blk in self.res:
            x = blk(x)
        return x


class Upsampler(Module):
    def __init__(self, ch: int, rng):
        self.conv_in = Conv(2 * ch + 2, ch, rng=rng)
        self.up1 = Conv(ch, 4 * ch, rng=rng)
        self.up2 = Conv(ch, 4 * ch, rng=rng)
        self.conv_out = Conv(ch, 3, rng=rng, init="zero")

    def __call__(self, hf, hb, cf, cb):
        x = ops.leaky_relu(self.conv_in(ops.concat([hf, hb, cf, cb], axis=1)), 0.1)
        x = ops.leaky_relu(ops.pixel_shuffle(self.up1(x), 2), 0.1)
        x = ops.leaky_relu(ops.pixel_shuffle(self.up2(x), 2), 0.1)
        return self.conv_out(x)


class RefVSRNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, encoder: Encoder | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.cell_f = RecurrentCell(self.cfg, rng)
        self.cell_b = RecurrentCell(self.cfg, rng)
        self.upsampler = Upsampler(self.cfg.channels, rng)
        self._encoder = encoder

    @property
    def encoder(self) -> Encoder:
        return self._encoder or default_encoder()

    def cell(self, direction: str) -> RecurrentCell:
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
        return self.cell_f if direction == "forward" else self.cell_b

    def initial_state(self, n: int, h: int, w: int, dtype=np.float32) -> CellState:
        ch = self.cfg.channels
        return CellState(Tensor(np.zeros((n, ch, h, w), dtype=dtype)),
                         Tensor(np.full((n, 1, h, w), self.cfg.init_confidence, dtype=dtype)))

    def mirrored(self) -> "RefVSRNet":
        """Copy with the two directions swapped (and the upsampler inputs permuted)."""
        twin = copy.deepcopy(self)
        twin.cell_f, twin.cell_b = twin.cell_b, twin.cell_f
        ch = self.cfg.channels
        w = twin.upsampler.conv_in.weight.data
        perm = np.r_[ch:2 * ch, 0:ch, 2 * ch + 1, 2 * ch]
        twin.upsampler.conv_in.weight.data = np.ascontiguousarray(w[:, perm])
        return twin


def match_batch(lr_cur, ref_cur, zoom: int, encoder=None, budget: TileBudget | None = None):
    """Index maps (n, h, w) and confidences (n, 1, h, w) for a batch of frames."""
    lr = lr_cur.data if isinstance(lr_cur, Tensor) else np.asarray(lr_cur)
    ref = ref_cur.data if isinstance(ref_cur, Tensor) else np.asarray(ref_cur)
    ps, cs = [], []
    for i in range(lr.shape[0]):
        p, c = match_frames(lr[i:i + 1], ref[i:i + 1], zoom, encoder, budget)
        ps.append(p)
        cs.append(c[None])
    return np.stack(ps), np.stack(cs).astype(lr.dtype)


def cell_step(net: RefVSRNet, direction: str, lr_prev, lr_cur, ref_cur, state_prev: CellState,
              matched=None, t: int | None = None) -> CellState:
    """One recurrent update of the ``direction`` branch."""
    cell = net.cell(direction)
    try:
        lr_prev, lr_cur, ref_cur = as_tensor(lr_prev), as_tensor(lr_cur), as_tensor(ref_cur)
        if lr_prev.shape != lr_cur.shape:
            raise ValueError(f"LR frames differ in size: {lr_prev.shape} vs {lr_cur.shape}")
        flow = estimate_flow(lr_cur, lr_prev)
        h_warp = ops.bilinear_warp(state_prev.h, flow)
        c_warp = warp_confidence(state_prev.c, flow)
        h_hat = cell.aggregate_lr(lr_cur, h_warp)
        if matched is None:
            matched = match_batch(lr_cur, ref_cur, net.cfg.zoom, net.encoder)
        p, c_t = matched
        c_t = Tensor(c_t.astype(lr_cur.dtype))
        ref_feats = cell.ref_extract(ref_cur)
        coarse = warp_by_index(ref_feats, p)
        aligned = affine_correct(coarse, h_hat, cell.align_head)
        h = fuse(h_hat, aligned, c_t, c_warp, cell.fusion)
        c = accumulate_confidence(c_t, c_warp)
    except ValueError as exc:
        where = f" at t={t}" if t is not None else ""
        raise ValueError(f"{direction} cell{where}: {exc}") from exc
    return CellState(h, Tensor(c.data))


def upsample_reconstruct(net: RefVSRNet, hf: CellState, hb: CellState, lr_cur) -> Tensor:
    lr_cur = as_tensor(lr_cur)
    if hf.grid != hb.grid or hf.h.shape[0] != hb.h.shape[0]:
        raise ValueError(f"state grids differ: {hf.h.shape} vs {hb.h.shape}")
    detail = net.upsampler(hf.h, hb.h, hf.c, hb.c)
    return ops.add(detail, ops.bicubic_resize(lr_cur, SCALE))


def run_bidirectional(net: RefVSRNet, lr_seq, ref_seq, budget: TileBudget | None = None) -> SequenceResult:
    """Super-resolve a sequence of (n, 3, h, w) LR frames with matching Ref frames."""
    T = len(lr_seq)
    if T == 0:
        raise ValueError("empty sequence")
    if len(ref_seq) != T:
        raise ValueError(f"sequence lengths differ: {T} LR vs {len(ref_seq)} Ref")
    lr_seq = [as_tensor(x) for x in lr_seq]
    ref_seq = [as_tensor(x) for x in ref_seq]
    n, _, h, w = lr_seq[0].shape
    matches = [match_batch(lr_seq[t], ref_seq[t], net.cfg.zoom, net.encoder, budget) for t in range(T)]

    states_b = [None] * T
    state = net.initial_state(n, h, w, lr_seq[0].dtype)
    for t in range(T - 1, -1, -1):
        prev = lr_seq[min(t + 1, T - 1)]
        state = cell_step(net, "backward", prev, lr_seq[t], ref_seq[t], state, matches[t], t)
        states_b[t] = state

    states_f = [None] * T
    state = net.initial_state(n, h, w, lr_seq[0].dtype)
    for t in range(T):
        prev = lr_seq[max(t - 1, 0)]
        state = cell_step(net, "forward", prev, lr_seq[t], ref_seq[t], state, matches[t], t)
        states_f[t] = state

    result = SequenceResult([])
    for t in range(T):
        result.sr_frames.append(upsample_reconstruct(net, states_f[t], states_b[t], lr_seq[t]))
        result.conf_f.append(states_f[t].c.data)
        result.conf_b.append(states_b[t].c.data)
        result.match_conf.append(matches[t][1])
    return result
