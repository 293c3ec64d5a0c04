"""Dense tensors with a tape for reverse-mode differentiation.

Each op result that depends on a ``requires_grad`` input remembers its parents
and a closure mapping the upstream gradient to one gradient per parent. Node
ids come from a global counter, so a parent always has a smaller id than any of
its consumers and sorting by id gives a valid reverse topological order. That
ordering is what makes gradient accumulation deterministic.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NumericOverflowError, ShapeError

_ids = itertools.count()
_state = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype):
    """Switch the dtype used when building tensors from Python data (fp64 or fp32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._backward = None
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward, op):
        """Wrap an op result; record a tape node when any parent needs a gradient."""
        if not np.all(np.isfinite(data)):
            raise NumericOverflowError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.id = next(_ids)
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out.parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def sum(self, axis=None):
        return ops.sum(self, axis)

    def mean(self, axis=None):
        return ops.mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def backward(loss, grad=None):
    """Populate ``.grad`` on every reachable leaf that requires it.

    Leaf gradients accumulate across calls; interior gradients are discarded.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack.extend(p for p in node.parents if p.requires_grad)

    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending = {loss.id: seed}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.id)
            pending[parent.id] = pg if prev is None else prev + pg


def grad_of(loss, wrt):
    """Gradients of a scalar ``loss`` with respect to leaf tensors ``wrt`` (list).

    Existing ``.grad`` buffers on ``wrt`` are cleared first.
    """
    for t in wrt:
        t.grad = None
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


from . import ops  # noqa: E402  (operator overloads resolve lazily)
