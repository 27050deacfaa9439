"""Rectified Adam, plain Adam, gradient-norm clipping and the cosine step-size schedule."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total: int, lr0: float = 2.0e-4, lr_min: float = 1.0e-6) -> float:
    if total <= 0:
        return lr0
    frac = min(max(step / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * frac))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class RAdam:
    """Rectified Adam (variance-rectified adaptive moments).

    With ``rectify=False`` this is plain Adam.
    """

    def __init__(self, params, lr=2.0e-4, betas=(0.9, 0.999), eps=1e-8, rectify=True):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.rectify = rectify
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        t, b1, b2 = self.t, self.b1, self.b2
        bc1 = 1 - b1 ** t
        bc2 = 1 - b2 ** t
        rho_inf = 2 / (1 - b2) - 1
        rho_t = rho_inf - 2 * t * b2 ** t / bc2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            if not self.rectify:
                upd = m_hat / (np.sqrt(v / bc2) + self.eps)
            elif rho_t > 4:
                r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
                upd = r * m_hat / (np.sqrt(v / bc2) + self.eps)
            else:
                upd = m_hat
            p.data = (p.data - lr * upd).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=self.params[i].dtype)
            self.v[i] = np.array(state[f"v.{i}"], dtype=self.params[i].dtype)
