"""A small reverse-mode differentiation core over float64 numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients into leaves created with
``requires_grad=True``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError, StateError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.value.size != 1:
            raise ShapeError("backward needs a scalar output")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    return _node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def total(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sum(a.value), (a,), lambda g: (np.full_like(a.value, g),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    return _node(np.mean(a.value), (a,), lambda g: (np.full_like(a.value, g / n),))


def log(a, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    a = as_tensor(a)
    clamped = np.maximum(a.value, floor)
    live = a.value > floor
    return _node(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def softmax(a) -> Tensor:
    """Row-wise softmax with max subtraction."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (a,), back)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """``a[index]`` along the first axis; the gradient scatter-adds back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), back)


def segment_max(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Per-channel maximum of rows of ``a`` grouped by ``segments``.

    Every segment id in ``[0, num_segments)`` must occur at least once. The
    gradient flows to the first row (in input order) attaining each maximum.
    """
    a = as_tensor(a)
    x = a.value
    segments = np.asarray(segments, dtype=np.int64)
    order = np.argsort(segments, kind="stable")
    sorted_seg = segments[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    if len(starts) != num_segments:
        raise ShapeError("segment_max needs every segment to be non-empty")
    xs = x[order]
    pooled = np.maximum.reduceat(xs, starts, axis=0)
    hit = xs == pooled[sorted_seg]
    pos = np.where(hit, np.arange(len(xs))[:, None], len(xs))
    first = np.minimum.reduceat(pos, starts, axis=0)
    winner = order[first]
    cols = np.broadcast_to(np.arange(x.shape[1]), winner.shape)

    def back(g):
        out = np.zeros_like(x)
        out[winner, cols] = g
        return (out,)

    return _node(pooled, (a,), back)


def sparse_conv(x, weight, bias, neighbors: np.ndarray) -> Tensor:
    """Submanifold sparse convolution.

    ``neighbors[v, k]`` is the row of the voxel at offset ``k`` from voxel
    ``v`` or -1 when that site is empty. Offsets must be ordered so that
    offset ``K - 1 - k`` is the negation of offset ``k``. ``weight`` has
    shape ``(K, F_in, F_out)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    m, f_in = x.shape
    k, wi, f_out = weight.shape
    if wi != f_in or neighbors.shape != (m, k):
        raise ShapeError(f"sparse_conv: features {x.shape}, weight {weight.shape}, "
                         f"neighbors {neighbors.shape}")
    nb = np.where(neighbors < 0, m, neighbors)
    padded = np.vstack([x.value, np.zeros((1, f_in))])
    cols = padded[nb].reshape(m, k * f_in)
    w2 = weight.value.reshape(k * f_in, f_out)
    out = cols @ w2

    def back(g):
        gw = (cols.T @ g).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(m, k, f_in)
            gpad = np.concatenate([gcols, np.zeros((1, k, f_in))])
            # site u receives from v at offset k exactly when v = nb(u, -k)
            gx = gpad[nb[:, ::-1], np.arange(k)].sum(axis=1)
        return gx, gw

    conv = _node(out, (x, weight), back)
    return conv if bias is None else add(conv, bias)


def batch_norm(x, gamma, beta, *, train: bool, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over rows with learned scale and shift.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if train:
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = gamma.value * xhat + beta.value

    def back(g):
        gg = np.sum(g * xhat, axis=0)
        gb = np.sum(g, axis=0)
        gxhat = g * gamma.value
        if train:
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * np.mean(gxhat * xhat, axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _node(out, (x, gamma, beta), back)
