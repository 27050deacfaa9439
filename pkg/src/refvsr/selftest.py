"""Oracle suites run by ``refvsr selftest``.

Each suite returns ``(passed, detail)``.  The matching suite includes
instances with exactly repeated Ref patches so that the tie-breaking rule
is exercised (flipping it via :func:`refvsr.matching.set_tie_rule` must
make the suite fail).
"""

from __future__ import annotations

import time

import numpy as np

from . import ops
from .align import affine_resample, fold_patches, squash_affine, warp_by_index
from .fusion import FusionParams, accumulate_confidence, fuse, warp_confidence
from .gradcheck import directional_check
from .losses import (LossConfig, adaptation_loss, blurred_l1, contextual_distance,
                     multi_ref_fidelity_loss, pretrain_loss, reconstruction_loss)
from .matching import TileBudget, brute_force_match, match
from .model import ModelConfig, RefVSRNet, run_bidirectional
from .tensor import Tensor, no_grad


def random_match_instance(rng, tie: bool = False):
    """Random (lr, ref) feature pair on grids of at most 16x16."""
    c = int(rng.integers(1, 5))
    ha, wa = (int(v) for v in rng.integers(2, 17, size=2))
    hb, wb = (int(v) for v in rng.integers(2, 17, size=2))
    if tie:
        tile = rng.standard_normal((c, 3, 3))
        reps = (1, -(-hb // 3) + 1, -(-wb // 3) + 1)
        ref = np.tile(tile, reps)[:, :hb, :wb]
        lr = np.tile(tile, (1, -(-ha // 3) + 1, -(-wa // 3) + 1))[:, :ha, :wa]
        lr = lr + 1e-3 * rng.standard_normal(lr.shape) * (rng.random(lr.shape) < 0.2)
    else:
        lr = rng.standard_normal((c, ha, wa))
        ref = rng.standard_normal((c, hb, wb))
    return lr.astype(np.float32)[None], ref.astype(np.float32)[None]


def suite_matching(instances: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    budgets = [TileBudget(9 * 4 * 256 * 8), TileBudget(9 * 4 * 256 * 8 * 5), TileBudget(64 << 20)]
    bad = 0
    for i in range(instances):
        lr, ref = random_match_instance(rng, tie=(i % 2 == 1))
        bi, bc = brute_force_match(lr, ref)
        for budget in budgets:
            ti, tc = match(lr, ref, budget)
            if not (np.array_equal(ti, bi) and np.max(np.abs(tc - bc)) <= 1e-6):
                bad += 1
                break
    return bad == 0, f"{instances - bad}/{instances} instances agree across {len(budgets)} tile budgets"


def _bind(module, tensors):
    """Point ``module``'s named tensors at ``tensors`` (same order)."""
    for (name, _), t in zip(module.named_tensors(), tensors):
        obj = module
        *path, last = name.split(".")
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, last, t)
    return module


def _grad_cases(rng):
    """(name, fn, inputs) triples covering every differentiable op and loss."""
    def rnd(*s):
        return rng.standard_normal(s)

    def probe(t, shape):
        # fixed non-uniform weighting so that sums do not hide errors
        return ops.mul(t, Tensor(np.cos(np.arange(int(np.prod(shape)))).reshape(shape)))

    x = rnd(1, 2, 6, 6)
    yield "add/sub/mul", lambda t: ops.sum(ops.mul(ops.sub(ops.add(t[0], t[1]), t[1]), ops.tanh(t[1]))), [x, rnd(1, 2, 6, 6)]
    yield "scale/mean", lambda t: ops.mean(ops.scale(ops.mul(t[0], t[0]), -0.7)), [x]
    yield "leaky_relu", lambda t: ops.sum(probe(ops.leaky_relu(t[0], 0.1), x.shape)), [x]
    yield "relu", lambda t: ops.sum(probe(ops.relu(t[0]), x.shape)), [x]
    yield "abs", lambda t: ops.sum(probe(ops.abs(t[0]), x.shape)), [x]
    yield "sigmoid", lambda t: ops.sum(probe(ops.sigmoid(t[0]), x.shape)), [x]
    yield "maximum", lambda t: ops.sum(probe(ops.maximum(t[0], t[1]), x.shape)), [x, rnd(1, 2, 6, 6)]
    yield "concat/channels", lambda t: ops.sum(probe(ops.channels(ops.concat([t[0], t[1]], 1), 1, 3), x.shape)), [x, rnd(1, 2, 6, 6)]
    yield "reshape", lambda t: ops.sum(ops.tanh(ops.mul(ops.reshape(t[0], (1, 4, 3, 6)), ops.reshape(t[0], (1, 4, 3, 6))))), [x]
    yield "repeat_cells", lambda t: ops.sum(probe(ops.repeat_cells(t[0], 3), (1, 2, 9, 9))), [rnd(1, 2, 3, 3)]
    yield "pixel_shuffle", lambda t: ops.sum(ops.tanh(ops.pixel_shuffle(t[0], 2))), [rnd(1, 4, 3, 3)]
    yield "pixel_unshuffle", lambda t: ops.sum(probe(ops.pixel_unshuffle(t[0], 2), (1, 8, 3, 3))), [x]
    yield "conv2d/zero", lambda t: ops.sum(probe(ops.conv2d(t[0], t[1], t[2]), (1, 2, 6, 6))), [x, rnd(2, 2, 3, 3), rnd(2)]
    yield "conv2d/replicate-s2", lambda t: ops.sum(ops.tanh(ops.conv2d(t[0], t[1], stride=2, padding="replicate"))), [x, rnd(3, 2, 3, 3)]
    yield "bicubic_resize/down", lambda t: ops.sum(ops.tanh(ops.bicubic_resize(t[0], 0.5))), [rnd(1, 1, 8, 8)]
    yield "bicubic_resize/up", lambda t: ops.sum(probe(ops.bicubic_resize(t[0], 4), (1, 1, 12, 16))), [rnd(1, 1, 3, 4)]
    yield "gaussian_blur3", lambda t: ops.sum(ops.tanh(ops.gaussian_blur3(t[0]))), [x]
    coords = np.stack(np.meshgrid(np.arange(5) + 0.3, np.arange(5) + 0.6, indexing="xy"))[None]
    yield "sample_bilinear", lambda t: ops.sum(ops.tanh(ops.sample_bilinear(t[0], t[1]))), [rnd(1, 2, 6, 6), coords + 0.1 * rnd(*coords.shape)]
    flow = 1.5 * rnd(1, 2, 6, 6)
    yield "bilinear_warp", lambda t: ops.sum(ops.tanh(ops.bilinear_warp(t[0], flow))), [x]
    yield "warp_confidence", lambda t: ops.sum(probe(warp_confidence(t[0], flow), (1, 1, 6, 6))), [rnd(1, 1, 6, 6)]
    yield "accumulate_confidence", lambda t: ops.sum(probe(accumulate_confidence(t[0], t[1]), (1, 1, 5, 5))), [rnd(1, 1, 5, 5), rnd(1, 1, 5, 5)]
    yield "fold_patches", lambda t: ops.sum(ops.tanh(fold_patches(t[0]))), [rnd(1, 2, 9, 12)]
    p = rng.integers(0, 9, size=(1, 4, 4))
    yield "warp_by_index", lambda t: ops.sum(ops.tanh(warp_by_index(t[0], p))), [rnd(1, 2, 3, 3)]
    yield "squash_affine", lambda t: ops.sum(probe(squash_affine(t[0]), (1, 6, 2, 2))), [rnd(1, 6, 2, 2)]
    yield "affine_resample", lambda t: ops.sum(ops.tanh(affine_resample(t[0], t[1]))), [rnd(1, 2, 4, 4), 0.3 * rnd(1, 6, 4, 4)]
    for simplified, act in ((False, None), (True, "sigmoid")):
        fp = FusionParams(2, simplified=simplified, gate_activation=act, rng=rng, dtype=np.float64)
        fp.feat.weight.data = rng.standard_normal(fp.feat.weight.shape)
        weights = [q.data for _, q in fp.named_tensors()]
        c_prev = rnd(1, 1, 4, 4)  # ignored by the simplified gate, so held constant
        yield (f"fuse/{'simplified' if simplified else 'full'}",
               lambda t, fp=fp, c_prev=c_prev: ops.sum(ops.tanh(fuse(t[0], t[1], t[2], c_prev, _bind(fp, t[3:])))),
               [rnd(1, 2, 4, 4), rnd(1, 2, 4, 4), rnd(1, 1, 4, 4)] + weights)
    cfg = LossConfig()
    hr = rng.random((1, 3, 8, 8))
    refs = [rng.random((1, 3, 8, 8)) for _ in range(3)]
    confs = [rng.random((1, 1, 2, 2)) for _ in range(3)]
    yield "blurred_l1", lambda t: blurred_l1(t[0], hr), [rng.random((1, 3, 8, 8))]
    yield "contextual_distance", lambda t: contextual_distance(t[0], hr, cfg=cfg), [rng.random((1, 3, 8, 8))]
    yield "reconstruction_loss", lambda t: reconstruction_loss(t[0], hr, cfg), [rng.random((1, 3, 8, 8))]
    yield "multi_ref_fidelity_loss", lambda t: multi_ref_fidelity_loss(t[0], refs, confs, cfg), [rng.random((1, 3, 8, 8))]
    yield "pretrain_loss", lambda t: pretrain_loss(t[0], hr, refs, confs, cfg), [rng.random((1, 3, 8, 8))]
    uw = rng.random((1, 3, 2, 2))
    yield "adaptation_loss", lambda t: adaptation_loss(t[0], uw, refs, confs, cfg), [rng.random((1, 3, 8, 8))]


def suite_gradients(seed: int = 0, tol: float = 1e-4, instances: int = 10):
    """Every case of :func:`_grad_cases` on ``instances`` independent draws."""
    rng = np.random.default_rng(seed)
    worst, failures, n_cases = 0.0, [], 0
    for _ in range(instances):
        for name, fn, inputs in _grad_cases(rng):
            err = directional_check(fn, inputs, rng)
            worst = max(worst, err)
            n_cases += 1
            if not err < tol:
                failures.append(f"{name} ({err:.2e})")
    if failures:
        return False, "failed: " + ", ".join(sorted(set(failures)))
    return True, f"{n_cases} checks, worst relative error {worst:.2e}"


def suite_invariants(seed: int = 0):
    rng = np.random.default_rng(seed)
    checks = {}
    x = rng.random((1, 8, 4, 6)).astype(np.float32)
    checks["pixel_shuffle round trip"] = np.array_equal(
        ops.pixel_unshuffle(ops.pixel_shuffle(Tensor(x), 2), 2).data, x)
    checks["zero-flow warp"] = np.array_equal(
        ops.bilinear_warp(Tensor(x), np.zeros((1, 2, 4, 6), np.float32)).data, x)
    params = FusionParams(8, rng=rng).zero_()
    h = rng.random((1, 8, 4, 6)).astype(np.float32)
    c = rng.random((1, 1, 4, 6)).astype(np.float32)
    checks["zero-weight fuse"] = np.array_equal(fuse(h, rng.random(h.shape).astype(np.float32), c, c, params).data, h)
    a, b, d = (rng.random((1, 1, 5, 5)) for _ in range(3))
    acc = lambda p, q: accumulate_confidence(p, q).data  # noqa: E731
    checks["confidence algebra"] = (np.array_equal(acc(a, a), a) and np.array_equal(acc(a, b), acc(b, a))
                                    and np.array_equal(acc(acc(a, b), d), acc(a, acc(b, d))))
    net = RefVSRNet(ModelConfig.small(num_blocks=1)).zero_()
    lr = [rng.random((1, 3, 8, 8)).astype(np.float32) for _ in range(2)]
    ref = [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(2)]
    with no_grad():
        res = run_bidirectional(net, lr, ref)
    checks["zero-weight network = bicubic"] = all(
        np.array_equal(res.sr_frames[t].data, ops.bicubic_resize(Tensor(lr[t]), 4).data) for t in range(2))
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        return False, "failed: " + ", ".join(failed)
    return True, f"{len(checks)} identities hold"


SUITES = {"matching": suite_matching, "gradients": suite_gradients, "invariants": suite_invariants}


def run_all(seed: int = 0, out=print) -> bool:
    ok_all = True
    for name, suite in SUITES.items():
        t0 = time.time()
        try:
            ok, detail = suite(seed=seed)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name:<11} {detail} ({time.time() - t0:.1f}s)")
    return ok_all
