"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operation that
produced it. Calling :func:`backward` on a scalar tensor walks the graph in
reverse topological order and accumulates ``.grad`` on every tensor created
with ``requires_grad=True``.

Only the handful of operations the alignment objectives need are provided.
Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "einsum",
    "tsum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "relu",
    "maximum",
    "log_softmax",
    "softmax",
    "l2_normalize",
]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __neg__(self):
        return _scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return _scale(self, float(other))
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return _scale(self, 1.0 / float(other))
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.value + b.value, _parents=(a, b), _backward=bw)


def _scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, _parents=(a,), _backward=lambda g: (g * c,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Tensor(a.value * b.value, _parents=(a, b), _backward=bw)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.value / b.value

    def bw(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor(out, _parents=(a, b), _backward=bw)


def _getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(a.value[idx], _parents=(a,), _backward=bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """``np.einsum`` with gradients; every operand index must survive in the
    output or another operand, and no index may repeat within one operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    value = np.einsum(subscripts, *(o.value for o in ops))

    def bw(g):
        grads = []
        for k, sub in enumerate(in_subs):
            if not ops[k].requires_grad:
                grads.append(None)
                continue
            others = [s for i, s in enumerate(in_subs) if i != k]
            vals = [o.value for i, o in enumerate(ops) if i != k]
            spec = ",".join([out_sub] + others) + "->" + sub
            grads.append(np.einsum(spec, g, *vals))
        return tuple(grads)

    return Tensor(value, _parents=tuple(ops), _backward=bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), _parents=(a,), _backward=lambda g: (g / a.value,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), _parents=(a,), _backward=lambda g: (g * mask,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant."""
    a = as_tensor(a)
    mask = a.value > floor
    return Tensor(np.where(mask, a.value, floor), _parents=(a,), _backward=lambda g: (g * mask,))


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = a.value.max(axis=axis, keepdims=True)
    z = a.value - shift
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, _parents=(a,), _backward=bw)


def softmax(a: Tensor, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(a,), _backward=bw)


# Added under the square root so zero vectors normalize to zero with finite gradients.
NORM_FLOOR = 1e-24


def l2_normalize(a: Tensor, axis=-1) -> Tensor:
    a = as_tensor(a)
    norm = sqrt(tsum(a * a, axis=axis, keepdims=True) + NORM_FLOOR)
    return a / norm


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward() without a seed needs a scalar root")
        seed = np.ones_like(root.value)

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

    grads = {id(root): np.asarray(seed, dtype=np.float64)}
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
