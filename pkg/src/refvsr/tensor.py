"""Dense 4-D tensors with a recorded graph and reverse-mode differentiation.

Only the operation set the super-resolution pipeline needs is supported
(see :mod:`refvsr.ops`).  A tensor records its parents and a backward
closure whenever at least one input requires a gradient, so constant
computations (frozen encoders, matching, flow) build no graph at all.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_CHECKED = os.environ.get("REFVSR_CHECKED", "0") not in ("", "0", "false")
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    pass


def set_checked(flag: bool) -> None:
    """Toggle finiteness validation at op boundaries."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True):
    global _CHECKED
    prev, _CHECKED = _CHECKED, bool(flag)
    try:
        yield
    finally:
        _CHECKED = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar; the implementations live in refvsr.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        dtype = np.float32
    return Tensor(x, dtype=dtype)


def make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap an op result, recording graph edges when any parent needs a gradient.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None, accumulate: bool = True):
    """Reverse-mode pass from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every differentiable leaf
    (unless ``accumulate`` is false).  When ``wrt`` is given, the matching
    gradients are returned in the same order; a requested leaf that the loss
    does not depend on raises ``ValueError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        if wrt:
            raise ValueError("loss does not depend on any differentiable leaf")
        return []
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaf_grads[id(node)] = (node, g)
            continue
        if _CHECKED and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient flowing into {node.op}")
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise AssertionError(f"{node.op}: gradient shape {pg.shape} != {p.data.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if accumulate:
        for node, g in leaf_grads.values():
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
    if wrt is None:
        return [n for n, _ in leaf_grads.values()]
    out = []
    for leaf in wrt:
        if id(leaf) not in leaf_grads:
            raise ValueError(f"leaf {leaf.name or leaf!r} is not reachable from the loss")
        out.append(leaf_grads[id(leaf)][1])
    return out
