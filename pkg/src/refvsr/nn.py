"""Parameter containers and layers built on the tensor engine."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters (``Tensor``) and child modules."""

    def named_tensors(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_tensors(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{key}.{i}.")

    def named_parameters(self, prefix: str = ""):
        return [(k, t) for k, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.named_tensors()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in state.items():
            if k not in own:
                continue
            if own[k].shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {own[k].shape}")
            own[k].data = np.array(arr, dtype=own[k].dtype)

    def astype(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def zero_(self):
        for _, t in self.named_tensors():
            if t.requires_grad:
                t.data = np.zeros_like(t.data)
        return self


def kaiming_uniform(rng, shape, slope=0.1):
    fan_in = int(np.prod(shape[1:]))
    gain = np.sqrt(2.0 / (1 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, shape, gain=1.0):
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols].reshape(shape)


class Conv(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding="zero", rng=None, init="kaiming",
                 bias=True, trainable=True, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, cin, k, k)
        if init == "zero":
            w = np.zeros(shape)
        elif init == "orthogonal":
            w = orthogonal(rng, shape, gain=np.sqrt(2.0))
        else:
            w = kaiming_uniform(rng, shape)
        self.weight = Tensor(w, dtype=dtype, requires_grad=trainable)
        self.bias = Tensor(np.zeros(cout), dtype=dtype, requires_grad=trainable) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResBlock(Module):
    """conv 3x3 -> leaky ReLU(0.1) -> conv 3x3, plus identity skip."""

    def __init__(self, ch, rng=None):
        self.conv1 = Conv(ch, ch, rng=rng)
        self.conv2 = Conv(ch, ch, rng=rng)
        # keep the residual branch small at start
        self.conv2.weight.data *= 0.1

    def __call__(self, x):
        return ops.add(x, self.conv2(ops.leaky_relu(self.conv1(x), 0.1)))
