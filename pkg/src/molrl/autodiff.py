"""Minimal reverse-mode automatic differentiation over numpy arrays.

Array-valued tape: each op records its parents and a per-parent backward
closure. A ``no_grad`` context skips the bookkeeping while performing the
exact same numpy calls, so taped and untaped forward passes are bitwise
identical.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True
_VISIT_EPOCH = 0


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "parents", "name", "_visit")

    # Make ndarray <op> Tensor defer to the Tensor reflected operators.
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, parents=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents if _GRAD_ENABLED else ()
        self.name = name
        self._visit = 0

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        out = self.data + other.data
        return Tensor(out, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        out = self.data - other.data
        return Tensor(out, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(-g, other.data.shape)),
        ))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        out = self.data * other.data
        return Tensor(out, (
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = self.data / other.data
        return Tensor(out, (
            (self, lambda g: _unbroadcast(g / other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(-g * self.data / other.data**2,
                                           other.data.shape)),
        ))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor(-self.data, ((self, lambda g: -g),))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("only constant exponents are supported")
        out = self.data**p
        return Tensor(out, ((self, lambda g: g * p * self.data**(p - 1)),))

    def __matmul__(self, other):
        # supports stacked left operands (..., n, q) @ (q, p)
        other = self._lift(other)
        out = self.data @ other.data
        q = self.data.shape[-1]

        def back_w(g):
            flat = self.data.reshape(-1, q)
            return flat.T @ g.reshape(flat.shape[0], -1)

        return Tensor(out, (
            (self, lambda g: g @ other.data.T),
            (other, back_w),
        ))

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def back(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, shape).copy()

        return Tensor(out, ((self, back),))

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, ((self, lambda g: g * out),))

    def log(self):
        out = np.log(self.data)
        return Tensor(out, ((self, lambda g: g / self.data),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, ((self, lambda g: g * 0.5 / out),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor(out, ((self, lambda g: g * out * (1.0 - out)),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, ((self, lambda g: g * (1.0 - out * out)),))

    def silu(self):
        s = _sigmoid(self.data)
        out = self.data * s
        return Tensor(out, ((self, lambda g: g * (s * (1.0 + self.data * (1.0 - s)))),))

    def clip(self, lo: float, hi: float):
        out = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor(out, ((self, lambda g: g * mask),))

    def take_rows(self, idx: np.ndarray):
        idx = np.asarray(idx)
        out = self.data[idx]
        shape = self.data.shape

        def back(g):
            acc = np.zeros(shape)
            np.add.at(acc, idx, g)
            return acc

        return Tensor(out, ((self, back),))

    # -- backward pass ------------------------------------------------------

    def backward(self):
        global _VISIT_EPOCH
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        _VISIT_EPOCH += 1
        epoch = _VISIT_EPOCH
        order = []
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._visit == epoch:
                continue
            node._visit = epoch
            node.grad = None
            stack.append((node, True))
            for parent, _ in node.parents:
                if parent._visit != epoch:
                    stack.append((parent, False))
        self.grad = np.ones(())
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, back in node.parents:
                contrib = back(node.grad)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with stacked-left-operand support."""
    x, w, b = Tensor._lift(x), Tensor._lift(w), Tensor._lift(b)
    out = x.data @ w.data + b.data
    q = x.data.shape[-1]
    p = w.data.shape[-1]

    def back_w(g):
        flat = x.data.reshape(-1, q)
        return flat.T @ g.reshape(flat.shape[0], p)

    return Tensor(out, (
        (x, lambda g: g @ w.data.T),
        (w, back_w),
        (b, lambda g: g.reshape(-1, p).sum(axis=0)),
    ))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient follows the selected branch (ties go to ``a``)."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    return Tensor(out, (
        (a, lambda g: _unbroadcast(g * mask, a.data.shape)),
        (b, lambda g: _unbroadcast(g * ~mask, b.data.shape)),
    ))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for k, t in enumerate(tensors):
        lo, hi = offsets[k], offsets[k + 1]

        def back(g, lo=lo, hi=hi):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(lo, hi)
            return g[tuple(slicer)]

        parents.append((t, back))
    return Tensor(out, tuple(parents))


def segment_sum(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``values`` into ``n_rows`` bins given by ``idx``."""
    values = Tensor._lift(values)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + values.data.shape[1:])
    np.add.at(out, idx, values.data)
    return Tensor(out, ((values, lambda g: g[idx]),))


def sum_squares(t: Tensor) -> Tensor:
    return (t * t).sum()


def check_finite(value: np.ndarray, context: str):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in {context}")
