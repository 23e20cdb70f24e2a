"""Dense float64 tensors with a reverse-mode tape.

Every op builds its output with :func:`Tensor._node`, passing the parent tensors
and a closure mapping the output gradient to one gradient per parent.  Only two
broadcasts exist: a 0-d scalar against anything, and a ``(N, C, 1, 1)``
channel-scalar against ``(N, C, H, W)``.  Anything else is a ``ShapeError``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _node(cls, data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -------------------------------------------------------------- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # ------------------------------------------------------------ backward
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf, then drop the tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
            node._parents = ()
            node._backward = None

    # ----------------------------------------------------------- operators
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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ------------------------------------------------------------------ broadcast


def broadcast_shape(a, b):
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == len(b) == 4 and a[:2] == b[:2]:
        if a[2:] == (1, 1):
            return b
        if b[2:] == (1, 1):
            return a
    raise ShapeError(f"incompatible shapes {a} and {b} (only scalar and channel-scalar broadcasts are allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._node(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._node(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(x, c: float):
    c = float(c)
    return Tensor._node(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x):
    # split by sign to stay finite for large |x|
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    mask = x.data > 0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,))


def sqrt(x):
    out = np.sqrt(x.data)
    return Tensor._node(out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    d = x.data
    return Tensor._node(d * d, (x,), lambda g: (2.0 * g * d,))


# ------------------------------------------------------------------ reductions


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------- shape plumbing


def reshape(x, shape):
    old = x.shape
    return Tensor._node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return Tensor._node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._node(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(x, index):
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.asarray(x.data[index]), (x,), backward)


def take(x, indices, axis=0):
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        g_moved = np.moveaxis(g, axis, 0)
        full_moved = np.moveaxis(full, axis, 0)
        np.add.at(full_moved, indices, g_moved)
        return (full,)

    return Tensor._node(np.take(x.data, indices, axis=axis), (x,), backward)


def pad2d(x, pads):
    """Zero-pad the last two axes by ``(top, bottom, left, right)``."""
    t, b, l, r = pads
    H, W = x.shape[-2:]
    width = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    return Tensor._node(np.pad(x.data, width), (x,), lambda g: (g[..., t:t + H, l:l + W],))
