"""Minimal reverse-mode differentiation over numpy arrays.

Graphs are built eagerly: every op returns a :class:`Var` holding its value and
a closure that maps the output gradient onto its parents.  Only the ops listed
in ``SUPPORTED_OPS`` may appear inside a graph handed to :func:`backward`.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_OPS = frozenset({
    "leaf", "add", "sub", "mul", "div", "neg", "exp", "matmul", "transpose",
    "reshape", "concat", "sum", "mean", "gather", "relu", "softmax",
    "logsumexp", "l2_normalize", "hinge", "entropy", "straight_through",
})


class UnsupportedOpError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def param(value):
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def const(value):
    return value if isinstance(value, Var) else Var(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _node(value, parents, fn, op):
    return Var(value, parents, fn, op)


def add(a, b):
    a, b = const(a), const(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = const(a), const(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = const(a), const(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b):
    a, b = const(a), const(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)), "div")


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def matmul(a, b):
    a, b = const(a), const(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def fn(g):
        av, bv = a.value, b.value
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), fn, "matmul")


def transpose(a, axes=None):
    a = const(a)
    if axes is None:
        axes = tuple(range(a.value.ndim))[:-2] + (a.value.ndim - 1, a.value.ndim - 2)
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = const(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(items, axis=0):
    items = [const(x) for x in items]
    sizes = np.cumsum([x.shape[axis] for x in items])[:-1]
    return _node(np.concatenate([x.value for x in items], axis=axis), items,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = const(a)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), fn, "sum")


def mean(a, axis=None, keepdims=False):
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), fn, "mean")


def gather(a, index):
    """Pick ``a[i, index[i]]`` along the last axis of a 2-D var."""
    a = const(a)
    rows = np.arange(a.shape[0])
    index = np.asarray(index)

    def fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _node(a.value[rows, index], (a,), fn, "gather")


def relu(a):
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(a, tau=1.0, axis=-1):
    s = a.value / tau
    s = s - np.max(s, axis=axis, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)) / tau,)

    return _node(p, (a,), fn, "softmax")


def logsumexp(a, tau=1.0, axis=-1):
    """``tau * log sum exp(a / tau)`` along ``axis`` (axis removed)."""
    s = a.value / tau
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = tau * np.squeeze(m + np.log(tot), axis=axis)
    p = e / tot

    def fn(g):
        return (np.expand_dims(g, axis) * p,)

    return _node(out, (a,), fn, "logsumexp")


def l2_normalize(a, axis=-1, eps=1e-12):
    norm = np.sqrt(np.sum(a.value ** 2, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.value / norm

    def fn(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _node(y, (a,), fn, "l2_normalize")


def hinge(a, margin):
    """``max(0, margin - a)`` elementwise."""
    active = a.value < margin
    return _node(np.where(active, margin - a.value, 0.0), (a,),
                 lambda g: (-g * active,), "hinge")


def entropy(p, axis=-1, eps=1e-300):
    """Shannon entropy of probability rows (axis removed), 0 ln 0 := 0."""
    pv = np.maximum(p.value, eps)
    logp = np.log(pv)
    out = -np.sum(p.value * logp, axis=axis)

    def fn(g):
        return (-np.expand_dims(g, axis) * (logp + 1.0),)

    return _node(out, (p,), fn, "entropy")


def one_hot_argmax(values, axis=-1):
    idx = np.argmax(values, axis=axis)
    out = np.zeros_like(values)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    return out


def straight_through(soft, axis=-1):
    """Forward: one-hot at the row argmax.  Backward: identity onto ``soft``."""
    return _node(one_hot_argmax(soft.value, axis), (soft,), lambda g: (g,), "straight_through")


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if root.value.size != 1:
        raise ValueError("backward needs a scalar root")
    order = _toposort(root)
    for node in order:
        if node.op not in SUPPORTED_OPS:
            raise UnsupportedOpError(f"op {node.op!r} has no registered backward rule")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
