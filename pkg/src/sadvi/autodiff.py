"""Reverse-mode differentiation on an append-only tape of array values.

Nodes hold numpy arrays (0-d arrays for scalars).  Every op below also
accepts plain arrays; when no argument is a Node the op just returns the
numpy result, so the same code runs with or without recording.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def variable(self, value) -> "Node":
        return Node(self, np.array(value, dtype=float), ())

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("tape", "index", "value", "parents")
    __array_ufunc__ = None  # make ndarray (op) Node defer to Node

    def __init__(self, tape: Tape, value: np.ndarray, parents: tuple):
        self.tape = tape
        self.value = value
        self.parents = parents  # ((parent_node, vjp), ...)
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)


def value(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(out: np.ndarray, args: Sequence, vjps: Sequence[Callable]):
    """Record ``out`` with parents ``args``; non-Node args are skipped."""
    tape = _tape_of(args)
    if tape is None:
        return out
    parents = tuple(
        (a, (lambda g, f=f, s=a.value.shape: _unbroadcast(f(g), s)))
        for a, f in zip(args, vjps)
        if isinstance(a, Node)
    )
    return Node(tape, out, parents)


def add(a, b):
    return _make(value(a) + value(b), (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    return _make(value(a) - value(b), (a, b), (lambda g: g, lambda g: -g))


def neg(a):
    return _make(-value(a), (a,), (lambda g: -g,))


def mul(a, b):
    va, vb = value(a), value(b)
    return _make(va * vb, (a, b), (lambda g: g * vb, lambda g: g * va))


def _safe_div(g, d):
    # a zero cotangent stays zero even where the local partial is infinite
    return np.divide(g, d, out=np.zeros(np.broadcast_shapes(np.shape(g), np.shape(d))), where=g != 0)


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _make(out, (a, b), (lambda g: _safe_div(g, vb), lambda g: -_safe_div(g * out, vb)))


def matmul(a, b):
    va, vb = value(a), value(b)
    return _make(
        va @ vb,
        (a, b),
        (lambda g: g @ np.swapaxes(vb, -1, -2), lambda g: np.swapaxes(va, -1, -2) @ g),
    )


def exp(a):
    out = np.exp(value(a))
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    va = value(a)
    with np.errstate(divide="ignore"):
        out = np.log(va)
    return _make(out, (a,), (lambda g: _safe_div(g, va),))


def square(a):
    va = value(a)
    return _make(va * va, (a,), (lambda g: 2.0 * g * va,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _make(out, (a,), (lambda g: 0.5 * g / out,))


def softplus(a):
    va = value(a)
    out = np.logaddexp(0.0, va)
    return _make(out, (a,), (lambda g: g * special.expit(va),))


def sigmoid(a):
    va = value(a)
    out = special.expit(va)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def elu(a):
    va = value(a)
    neg_part = np.expm1(np.minimum(va, 0.0))
    out = np.where(va > 0, va, neg_part)
    return _make(out, (a,), (lambda g: g * np.where(va > 0, 1.0, neg_part + 1.0),))


def floor_at(a, lo: float):
    """max(a, lo) with zero gradient where the floor is active."""
    va = value(a)
    keep = va > lo
    return _make(np.where(keep, va, lo), (a,), (lambda g: g * keep,))


def sum_(a, axis=None, keepdims=False):
    va = value(a)
    out = va.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape)

    return _make(out, (a,), (vjp,))


def getitem(a, idx):
    va = value(a)

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return full

    return _make(va[idx], (a,), (vjp,))


def reshape(a, shape):
    va = value(a)
    return _make(va.reshape(shape), (a,), (lambda g: g.reshape(va.shape),))


def expand_dims(a, axis):
    va = value(a)
    return _make(np.expand_dims(va, axis), (a,), (lambda g: np.squeeze(g, axis),))


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, value(a), value(b)),
        (a, b),
        (lambda g: np.where(mask, g, 0.0), lambda g: np.where(mask, 0.0, g)),
    )


def logsumexp(a, axis=-1):
    """Stable log-sum-exp; rows that are entirely -inf give -inf, grad 0."""
    va = value(a)
    m = np.max(va, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.exp(va - m_safe)
        s = e.sum(axis=axis, keepdims=True)
        out = np.log(s) + m_safe
        w = np.where(s > 0, e / s, 0.0)
    return _make(np.squeeze(out, axis), (a,), (lambda g: np.expand_dims(g, axis) * w,))


def log_softmax(a, axis=-1):
    va = value(a)
    m = va.max(axis=axis, keepdims=True)
    shifted = va - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), (lambda g: g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    va = value(a)
    e = np.exp(va - va.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), (lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def elementwise(fn: Callable, dfn: Callable, a):
    """Lift a numpy function with known derivative ``dfn`` onto the tape."""
    va = value(a)
    out = fn(va)
    return _make(out, (a,), (lambda g: g * dfn(va),))


def expm1(a):
    return elementwise(np.expm1, np.exp, a)


def ndtr(a):
    return elementwise(special.ndtr, lambda v: np.exp(-0.5 * v * v) / np.sqrt(2 * np.pi), a)


def ndtri(a):
    va = value(a)
    out = special.ndtri(va)
    dens = np.exp(-0.5 * out * out) / np.sqrt(2 * np.pi)
    return _make(out, (a,), (lambda g: g / dens,))


def ndtri_exp(a):
    """Inverse of log_ndtr: ``ndtri(exp(a))`` without underflow in the tail."""
    va = value(a)
    out = special.ndtri_exp(va)
    # dx/dy = exp(y) / phi(x), evaluated in log space
    d = np.exp(va + 0.5 * out * out + 0.5 * np.log(2 * np.pi))
    return _make(out, (a,), (lambda g: g * d,))


def log_ndtr(a):
    va = value(a)
    out = special.log_ndtr(va)
    # d/dv log Phi(v) = phi(v) / Phi(v), evaluated in log space
    d = np.exp(-0.5 * va * va - 0.5 * np.log(2 * np.pi) - out)
    return _make(out, (a,), (lambda g: g * d,))


def backward(root: Node) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. every node, keyed by node index.

    Nodes are visited once, in reverse tape order; that order is
    topological because parents are always recorded before children.
    """
    if not isinstance(root, Node):
        raise TypeError("backward needs a recorded Node")
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    nodes = root.tape.nodes
    for i in range(root.index, -1, -1):
        g = grads.pop(i, None) if i != root.index else grads[i]
        node = nodes[i]
        if g is None or not node.parents:
            if g is not None:
                grads[i] = g
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            j = parent.index
            if j in grads:
                grads[j] = grads[j] + pg
            else:
                grads[j] = pg
    return grads


def grad(root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Convenience wrapper: gradients for ``wrt`` (zeros if unreached)."""
    g = backward(root)
    return [g.get(n.index, np.zeros_like(n.value)) for n in wrt]
