"""Minimal reverse-mode differentiation over numpy arrays.

Each :class:`Var` records its parents and a vector-Jacobian product. Calling
:func:`grad` on a scalar walks the recorded graph in reverse topological order.
Only the operations the link-prediction model needs are provided.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "grad")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def param(value, name=None) -> Var:
    return Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, vjp) -> Var:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Var(value)
    return Var(value, parents=parents, vjp=vjp, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Var:
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value @ b.value, (a, b),
                 lambda g: (g @ np.swapaxes(b.value, -1, -2), np.swapaxes(a.value, -1, -2) @ g))


def einsum(subscripts: str, a, b) -> Var:
    """Two-operand einsum. Every index of an operand must appear in the output or the other operand."""
    a, b = as_var(a), as_var(b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")

    def vjp(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, b.value),
                np.einsum(f"{out},{sa}->{sb}", g, a.value))

    return _make(np.einsum(subscripts, a.value, b.value), (a, b), vjp)


def take(a, idx) -> Var:
    """Row gather ``a[idx]`` (advanced indexing on the first axis)."""
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), vjp)


def concat(parts, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    axis = axis % parts[0].value.ndim
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def reshape(a, shape) -> Var:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None) -> Var:  # noqa: A001
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), vjp)


def relu(a) -> Var:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Var:
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,))


def sqrt(a) -> Var:
    """Square root whose derivative at 0 is taken as 0 (a subgradient, not infinity)."""
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)
    dout = np.where(out > 0, 0.5 / safe, 0.0)
    return _make(out, (a,), lambda g: (g * dout,))


def transpose(a) -> Var:
    return _make(a.value.T, (a,), lambda g: (g.T,))


def grad(loss: Var, wrt=None) -> dict:
    """Backpropagate from a scalar ``loss``.

    Returns a dict mapping each leaf (or each Var in ``wrt``) to its gradient;
    leaves the loss does not depend on get zeros.
    """
    if loss.value.shape != ():
        raise ValueError("grad needs a scalar loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    leaves = wrt if wrt is not None else [n for n in order if n.vjp is None]
    result = {}
    for leaf in leaves:
        g = leaf.grad if id(leaf) in seen and leaf.grad is not None else None
        result[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64)
        leaf.grad = None
    return result
