"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Each op records its parents and a backward closure on the result node; the
implicit tape is the resulting DAG, replayed once in reverse topological
order by :func:`backward`.  f64 throughout; ops support leading batch
dimensions where noted.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DetachedGraphError(RuntimeError):
    pass


class MaskViabilityError(RuntimeError):
    """A softmax row with no allowed entry; unreachable for viable masks."""


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _result(data, parents, backward) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        a._accumulate(g * s)

    return _result(a.data * s, (a,), bwd)


def matmul(a, b) -> Tensor:
    """np.matmul semantics; supports batched operands on either side."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires >= 2-d operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(out, (a, b), bwd)


def transpose(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0

    def bwd(g):
        a._accumulate(g * keep)

    return _result(np.where(keep, a.data, 0.0), (a,), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _result(a.data.sum(), (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _result(a.data.mean(), (a,), bwd)


def masked_softmax(scores, allowed: np.ndarray) -> Tensor:
    """Row softmax over allowed entries only; blocked entries are exactly 0.

    ``allowed`` is boolean, broadcastable to ``scores``; normalization and the
    stabilizing row-max run over the allowed set, so blocked positions carry
    neither mass nor gradient.
    """
    scores = _as_tensor(scores)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.data.shape)
    if not allowed.any(axis=-1).all():
        raise MaskViabilityError("softmax row with no allowed entries")
    neg = np.where(allowed, scores.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(neg - mx), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        scores._accumulate(p * (g - inner))

    return _result(p, (scores,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        gg = g * gain.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv)
        axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=axes) if axes else g * xhat)
        bias._accumulate(g.sum(axis=axes) if axes else g)

    return _result(out, (x, gain, bias), bwd)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _result(out, (table,), bwd)


def take_positions(x, idx: np.ndarray) -> Tensor:
    """x: (b, n, d), idx: (b,) -> (b, d) rows at per-example positions."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    b = x.data.shape[0]
    rows = np.arange(b)
    out = x.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        x._accumulate(full)

    return _result(out, (x,), bwd)


def cross_entropy_mean(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over logits (b, c)."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    b, c = logits.data.shape
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError("target out of range")
    mx = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), targets].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(b), targets] -= 1.0
        logits._accumulate(p * (float(g) / b))

    return _result(loss, (logits,), bwd)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.data.ndim != 0:
        raise ShapeError("backward expects a scalar loss")
    if loss._backward is None and not loss._parents:
        raise DetachedGraphError("loss is not attached to a recorded graph")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
