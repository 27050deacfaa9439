"""Two-stage training (pre-training and adaptation), inference and evaluation helpers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (CropSpec, VideoTriplet, full_frame_inputs, imresize, list_clips,
                   load_sequence, sample_sequence, stack_batch)
from .losses import (DistanceMeasure, adaptation_loss, confidence_table, pretrain_loss,
                     recurrent_confidences, target_features, window_indices)
from .matching import TileBudget
from .metrics import psnr
from .model import RefVSRNet, SCALE, run_bidirectional
from .optim import RAdam, clip_grad_norm, cosine_lr
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path | None
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    degenerate_steps: int = 0


def build_model(cfg: RunConfig) -> RefVSRNet:
    return RefVSRNet(cfg.model_config())


def split_clips(cfg: RunConfig):
    clips = list_clips(cfg.data_dir)
    if len(clips) <= cfg.holdout:
        raise ValueError(f"{len(clips)} clips cannot leave {cfg.holdout} held out")
    cut = len(clips) - cfg.holdout
    return clips[:cut], clips[cut:]


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def load_model(path, cfg: RunConfig | None = None):
    """Model (and metadata) from a checkpoint; the stored config wins over ``cfg``."""
    model_state, optim_state, meta = load_checkpoint(path)
    stored = RunConfig(**meta["config"]) if "config" in meta else cfg
    if stored is None:
        raise ValueError(f"{path} has no stored config and none was given")
    net = build_model(stored)
    net.load_state_dict(model_state)
    return net, optim_state, meta, stored


def _window_confs(res, lr_seq, ref_seq, zoom, cfg: RunConfig, budget):
    T = len(lr_seq)
    if cfg.confidence_source == "recurrent":
        per_frame = recurrent_confidences(res.conf_f, res.conf_b)
        return {(t, tp): per_frame[tp] for t in range(T)
                for tp in window_indices(t, T, cfg.window_k)}
    known = {(t, t): res.match_conf[t] for t in range(T)} if zoom == cfg.zoom else None
    return confidence_table(lr_seq, ref_seq, zoom, cfg.window_k, budget=budget, known=known)


def sequence_loss(net, batch: dict, stage: str, cfg: RunConfig, budget=None):
    """Mean per-frame objective of one batch of sequences; returns (loss, sr_frames)."""
    lcfg = cfg.loss_config()
    D = DistanceMeasure()
    lr_seq, ref_seq = batch["lr"], batch["ref"]
    res = run_bidirectional(net, lr_seq, ref_seq, budget)
    T = len(lr_seq)
    total = None
    if stage == "pretrain":
        need_mfid = lcfg.lambda_pre > 0
        targets = [target_features(r, D) for r in batch["ref_hr"]] if need_mfid else None
        confs = _window_confs(res, lr_seq, batch["ref"], cfg.zoom, cfg, budget) if need_mfid else None
        for t in range(T):
            win = window_indices(t, T, lcfg.window_k)
            refs = [targets[j] for j in win] if need_mfid else [batch["ref_hr"][t]]
            cw = [confs[(t, j)] for j in win] if need_mfid else [np.ones((1, 1, 1, 1))]
            term = pretrain_loss(res.sr_frames[t], batch["gt"][t], refs, cw, lcfg, D)
            total = term if total is None else ops.add(total, term)
    else:
        need_mfid = lcfg.lambda_8k > 0
        targets = [target_features(r, D) for r in batch["tele"]] if need_mfid else None
        confs = _window_confs(res, lr_seq, batch["tele"], 4, cfg, budget) if need_mfid else None
        for t in range(T):
            win = window_indices(t, T, lcfg.window_k)
            refs = [targets[j] for j in win] if need_mfid else [batch["tele"][t]]
            cw = [confs[(t, j)] for j in win] if need_mfid else [np.ones((1, 1, 1, 1))]
            term = adaptation_loss(res.sr_frames[t], batch["uw"][t], refs, cw, lcfg, D)
            total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / T), res.sr_frames


def sample_batch(triplets, cfg: RunConfig, stage: str, rng) -> dict:
    spec = CropSpec(lr_size=cfg.pretrain_lr_size if stage == "pretrain" else cfg.adapt_lr_size,
                    jitter=cfg.jitter, rng_seed=cfg.seed)
    seqs = []
    for _ in range(cfg.batch_size):
        tri = triplets[int(rng.integers(len(triplets)))]
        seqs.append(sample_sequence(tri, spec, stage, cfg.seq_len, rng))
    keys = ("lr", "ref", "gt", "ref_hr") if stage == "pretrain" else ("lr", "ref", "tele", "uw")
    return {k: stack_batch(seqs, k) for k in keys}


def train_stage(cfg: RunConfig, stage: str, out_dir, init_checkpoint=None, resume=None,
                steps: int | None = None, triplets=None, progress=None,
                stop_after: int | None = None) -> TrainResult:
    """Run ``stage`` ("pretrain" or "adapt") and write ``<out_dir>/<stage>.npz``.

    ``resume`` continues an interrupted run of the same stage (model,
    optimizer, schedule position and RNG are restored).  ``init_checkpoint``
    seeds the model weights only (adaptation starts from pre-training).
    ``stop_after`` interrupts the run at that step (schedule unchanged) and
    leaves a resumable checkpoint.
    """
    if stage not in ("pretrain", "adapt"):
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = steps if steps is not None else (cfg.pretrain_steps if stage == "pretrain" else cfg.adapt_steps)
    if triplets is None:
        train_clips, _ = split_clips(cfg)
        triplets = [load_sequence(c) for c in train_clips]
    net = build_model(cfg)
    opt = RAdam(net.parameters(), lr=cfg.lr, rectify=cfg.rectify)
    rng = np.random.default_rng([cfg.seed, 0 if stage == "pretrain" else 1])
    start = 0
    history_steps, history_losses = [], []
    if resume is not None:
        model_state, optim_state, meta = load_checkpoint(resume)
        if meta.get("stage") != stage:
            raise ValueError(f"cannot resume {stage} from a {meta.get('stage')} checkpoint")
        net.load_state_dict(model_state)
        opt.load_state_dict(optim_state)
        rng = _restore_rng(meta["rng"])
        start = int(meta["step"])
        if steps is None:
            total = int(meta.get("total_steps", total))
        history_steps, history_losses = list(meta.get("log_steps", [])), list(meta.get("log_losses", []))
    elif init_checkpoint is not None:
        model_state, _, _ = load_checkpoint(init_checkpoint)
        net.load_state_dict(model_state)
    budget = TileBudget(cfg.tile_budget_mb << 20)
    (out_dir / "config.txt").write_text(cfg.to_text())
    log_path = out_dir / f"{stage}_loss.tsv"
    if start == 0:
        log_path.write_text("step\tloss\tlr\tseconds\n")
    ckpt = out_dir / f"{stage}.npz"
    t0 = time.time()

    def save(step):
        meta = {"stage": stage, "step": step, "total_steps": total, "config": cfg.to_dict(),
                "rng": _rng_state(rng), "log_steps": history_steps, "log_losses": history_losses}
        save_checkpoint(ckpt, net.state_dict(), meta, opt.state_dict())

    end = total if stop_after is None else min(total, stop_after)
    for step in range(start, end):
        batch = sample_batch(triplets, cfg, stage, rng)
        loss, _ = sequence_loss(net, batch, stage, cfg, budget)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"{stage}: non-finite loss {value} at step {step} "
                                   f"(lr {cosine_lr(step, total, cfg.lr, cfg.lr_min):.3g}); "
                                   "last good checkpoint left untouched")
        net.zero_grad()
        backward(loss, net.parameters())
        for name, p in net.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"{stage}: non-finite gradient in {name} at step {step}")
        if cfg.grad_clip:
            clip_grad_norm(net.parameters(), cfg.grad_clip)
        opt.step(cosine_lr(step, total, cfg.lr, cfg.lr_min))
        history_steps.append(step)
        history_losses.append(value)
        with log_path.open("a") as fh:
            fh.write(f"{step}\t{value:.8g}\t{cosine_lr(step, total, cfg.lr, cfg.lr_min):.6g}\t"
                     f"{time.time() - t0:.2f}\n")
        if progress is not None:
            progress(step, value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d/%d loss %.5f", stage, step, total, value)
        if cfg.save_every and (step + 1) % cfg.save_every == 0 and step + 1 < total:
            save(step + 1)
    save(end)
    try:
        from .plotting import plot_loss_curve
        plot_loss_curve(history_steps, history_losses, out_dir / f"{stage}_loss.png", f"{stage} loss")
    except ValueError:
        pass
    return TrainResult(ckpt, history_steps, history_losses, time.time() - t0)


# ---------------------------------------------------------------- inference

def super_resolve(net: RefVSRNet, lr_seq, ref_seq, budget=None) -> list:
    """SR frames (1, 3, 4h, 4w) as float32 arrays, without building a graph."""
    lr_seq = [np.asarray(x, dtype=np.float32) for x in lr_seq]
    ref_seq = [np.asarray(x, dtype=np.float32) for x in ref_seq]
    h, w = lr_seq[0].shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"LR frame size {(h, w)} must be divisible by 8")
    with no_grad():
        res = run_bidirectional(net, [Tensor(x) for x in lr_seq], [Tensor(x) for x in ref_seq], budget)
    return [f.data for f in res.sr_frames]


def bicubic_baseline(lr_seq) -> list:
    return [imresize(np.asarray(x)[0], SCALE)[None].astype(np.float32) for x in lr_seq]


def evaluate_pretrain_scale(net: RefVSRNet, triplets) -> dict:
    """Mean PSNR of SR and bicubic 4x vs the ultra-wide ground truth at pre-training scale."""
    sr_p, bic_p = [], []
    for tri in triplets:
        lr, ref = full_frame_inputs(tri, "pretrain")
        sr = super_resolve(net, lr, ref)
        bic = bicubic_baseline(lr)
        for t in range(tri.frames):
            gt = tri.uw[t]
            sr_p.append(psnr(np.clip(sr[t][0], 0, 1), gt))
            bic_p.append(psnr(np.clip(bic[t][0], 0, 1), gt))
    return {"sr_psnr": float(np.mean(sr_p)), "bicubic_psnr": float(np.mean(bic_p)),
            "gain_db": float(np.mean(sr_p) - np.mean(bic_p))}


def tele_region_eval(net: RefVSRNet, tri: VideoTriplet, margin: int = 8) -> dict:
    """Native-scale evaluation around the telephoto FoV.

    The network sees an ultra-wide window extending the tele FoV by
    ``margin`` pixels on each side (with the matching wide window as Ref).
    Reports PSNR of the 4x output against the world image inside the tele
    FoV, and the low-frequency consistency PSNR of the downscaled output
    against the ultra-wide input over the whole window.
    """
    if tri.world is None:
        raise ValueError("tele-region evaluation needs the generator's world image")
    h, w = tri.size
    y0, x0 = 3 * h // 8 - margin, 3 * w // 8 - margin
    hh, ww = h // 4 + 2 * margin, w // 4 + 2 * margin
    if y0 < h // 4 or x0 < w // 4:
        raise ValueError("margin pushes the window outside the wide FoV")
    lr_seq, ref_seq = [], []
    for t in range(tri.frames):
        lr_seq.append(tri.uw[t, :, y0:y0 + hh, x0:x0 + ww][None])
        wy, wx = 2 * y0 - h // 2, 2 * x0 - w // 2
        ref_seq.append(tri.wide[t, :, wy:wy + 2 * hh, wx:wx + 2 * ww][None])
    sr = super_resolve(net, lr_seq, ref_seq)
    tele_p, lowfreq_p = [], []
    m4 = 4 * margin
    for t in range(tri.frames):
        out = np.clip(sr[t][0], 0, 1)
        gt_tele = tri.world_window(t, 4 * y0, 4 * x0, 4 * hh, 4 * ww)[:, m4:-m4, m4:-m4]
        tele_p.append(psnr(out[:, m4:-m4, m4:-m4], gt_tele))
        blur = lambda x: ops.gaussian_blur3(Tensor(np.asarray(x, np.float64)[None])).data[0]  # noqa: E731
        down = imresize(out, 0.25)
        lowfreq_p.append(psnr(np.clip(blur(down), 0, 1), np.clip(blur(lr_seq[t][0]), 0, 1)))
    return {"tele_psnr": float(np.mean(tele_p)), "lowfreq_psnr": float(np.mean(lowfreq_p))}
