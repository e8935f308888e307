"""Tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a
closure that pushes its gradient back to them.  Only the handful of
operations the auto-encoder needs are provided.
"""
import numpy as np

from ..errors import GraphError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Populate ``.grad`` on every tensor this one depends on."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        for node in order:
            if node is not self and node._parents:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __getitem__(self, idx):
        return take(self, idx)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a, getattr(b, "dtype", None)), _wrap(b, getattr(a, "dtype", None))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), backward=backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return Tensor(-a.data, parents=(a,), backward=backward)


def mul(a, b):
    a, b = _wrap(a, getattr(b, "dtype", None)), _wrap(b, getattr(a, "dtype", None))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, parents=(a, b), backward=backward)


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return Tensor(out, parents=(a,), backward=backward)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(out, parents=(a,), backward=backward)


def take(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        if isinstance(idx, slice):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor(out, parents=(a,), backward=backward)


def concat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(out, parents=tuple(tensors), backward=backward)


def square(a):
    def backward(g):
        a._accumulate(2.0 * a.data * g)

    return Tensor(a.data * a.data, parents=(a,), backward=backward)


def row_cosine(a, b):
    """Cosine similarity between matching rows of two (N, d) tensors.

    Rows where either vector has zero norm get similarity 0 and no gradient.
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_cosine needs equal (N, d) shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    dot = (a.data * b.data).sum(axis=1)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0).astype(a.dtype)

    def backward(g):
        gg = np.where(ok, g, 0.0)[:, None]
        inv = (1.0 / denom)[:, None]
        safe_na2 = np.where(ok, na * na, 1.0)[:, None]
        safe_nb2 = np.where(ok, nb * nb, 1.0)[:, None]
        c = cos[:, None]
        if a.requires_grad:
            a._accumulate(gg * (b.data * inv - c * a.data / safe_na2))
        if b.requires_grad:
            b._accumulate(gg * (a.data * inv - c * b.data / safe_nb2))

    return Tensor(cos, parents=(a, b), backward=backward)


def backprop(params, loss):
    """Gradients of a scalar ``loss`` with respect to each named parameter.

    Parameters that ``loss`` does not depend on receive zero gradients.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
