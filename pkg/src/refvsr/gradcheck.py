"""Finite-difference gradient checks in 64-bit precision."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def directional_check(fn, inputs, rng, directions: int = 3, eps: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference directional derivatives.

    ``fn`` maps a list of float64 Tensors to a scalar Tensor; every input is
    differentiated.  Each probe perturbs all inputs along a random unit
    direction.
    """
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(b.copy(), requires_grad=True) for b in base]
    out = fn(ts)
    if out.data.size != 1:
        raise ValueError("gradient check needs a scalar output")
    backward(out, ts)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(b.shape) for b in base]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        plus = float(fn([Tensor(b + eps * v) for b, v in zip(base, vs)]).data)
        minus = float(fn([Tensor(b - eps * v) for b, v in zip(base, vs)]).data)
        fd = (plus - minus) / (2 * eps)
        an = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst
