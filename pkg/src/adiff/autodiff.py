"""Minimal reverse-mode differentiation over whole numpy arrays.

A :class:`Tape` records one node per array-level primitive (arithmetic,
slicing, padding, reductions). Kernels elsewhere in the package are written
against the free functions in this module, which dispatch to plain numpy when
no taped value is involved. The same code therefore serves the fast forward
solver and the differentiated one.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "NonFiniteGradientError",
    "value",
    "is_var",
    "pad",
    "where",
    "relu",
    "safe_norm",
    "square",
    "minimum",
    "stack",
    "total",
    "mean",
]


class NonFiniteGradientError(FloatingPointError):
    pass


class Tape:
    def __init__(self):
        self._nodes: list[Var] = []

    def __len__(self):
        return len(self._nodes)

    def var(self, array) -> "Var":
        """Register a leaf (an independent variable)."""
        return Var(np.array(array, dtype=np.float64), self)

    def _record(self, value, parents, backward) -> "Var":
        out = Var(value, self, parents, backward)
        return out

    def gradient(self, output: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if np.ndim(output.value) != 0:
            raise ValueError("gradient requires a scalar output")
        grads: dict[int, np.ndarray] = {id(output): np.ones(())}
        for node in reversed(self._nodes[: output._index + 1]):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, contrib in zip(node._parents, node._backward(g)):
                if parent is None or contrib is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
        out = []
        for w in wrt:
            g = grads.get(id(w))
            g = np.zeros_like(w.value) if g is None else np.broadcast_to(g, w.value.shape).copy()
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite adjoint detected")
            out.append(g)
        return out


class Var:
    """A taped array value. Supports ``+ - * /``, unary minus and basic indexing."""

    __array_priority__ = 1000.0

    def __init__(self, value, tape: Tape, parents=(), backward: Callable | None = None):
        self.value = value
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self._index = len(tape._nodes)
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

    def __neg__(self):
        return self.tape._record(-self.value, (self,), lambda g: (-g,))

    def __add__(self, other):
        return _binary(self, other, np.add)

    def __radd__(self, other):
        return _binary(other, self, np.add)

    def __sub__(self, other):
        return _binary(self, other, np.subtract)

    def __rsub__(self, other):
        return _binary(other, self, np.subtract)

    def __mul__(self, other):
        return _binary(self, other, np.multiply)

    def __rmul__(self, other):
        return _binary(other, self, np.multiply)

    def __truediv__(self, other):
        return _binary(self, other, np.divide)

    def __rtruediv__(self, other):
        return _binary(other, self, np.divide)

    def __getitem__(self, index):
        shape = self.value.shape

        def back(g):
            full = np.zeros(shape)
            full[index] += g
            return (full,)

        return self.tape._record(self.value[index], (self,), back)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Plain array behind ``x``."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, op):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = op(av, bv)
    a_shape, b_shape = np.shape(av), np.shape(bv)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)

    if op is np.add:
        def back(g):
            return (_unbroadcast(g, a_shape) if a_var else None,
                    _unbroadcast(g, b_shape) if b_var else None)
    elif op is np.subtract:
        def back(g):
            return (_unbroadcast(g, a_shape) if a_var else None,
                    _unbroadcast(-g, b_shape) if b_var else None)
    elif op is np.multiply:
        def back(g):
            return (_unbroadcast(g * bv, a_shape) if a_var else None,
                    _unbroadcast(g * av, b_shape) if b_var else None)
    elif op is np.divide:
        def back(g):
            return (_unbroadcast(g / bv, a_shape) if a_var else None,
                    _unbroadcast(-g * av / (bv * bv), b_shape) if b_var else None)
    else:  # pragma: no cover
        raise NotImplementedError(op)
    return tape._record(out, (a if a_var else None, b if b_var else None), back)


def square(x):
    if not isinstance(x, Var):
        return x * x
    xv = x.value
    return x.tape._record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def relu(x):
    """max(x, 0). The subgradient at exactly 0 is taken as 1 (right derivative)."""
    if not isinstance(x, Var):
        return np.maximum(x, 0.0)
    keep = x.value >= 0
    return x.tape._record(np.where(keep, x.value, 0.0), (x,), lambda g: (g * keep,))


def where(mask, a, b):
    """Select with a constant boolean mask."""
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    if tape is None:
        return out
    a_shape, b_shape = np.shape(av), np.shape(bv)

    def back(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a_shape) if isinstance(a, Var) else None,
                _unbroadcast(np.where(mask, 0.0, g), b_shape) if isinstance(b, Var) else None)

    return tape._record(out, (a if isinstance(a, Var) else None,
                              b if isinstance(b, Var) else None), back)


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to ``a``."""
    mask = value(a) <= value(b)
    return where(mask, a, b)


def safe_norm(components: Sequence, eps: float = 0.0):
    """Euclidean norm over a list of same-shaped arrays, with zero gradient at 0."""
    sq = None
    for c in components:
        sq = square(c) if sq is None else sq + square(c)
    if not isinstance(sq, Var):
        return np.sqrt(sq)
    n = np.sqrt(sq.value)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(n > eps, 0.5 / np.where(n > 0, n, 1.0), 0.0)
        return (g * d,)

    return sq.tape._record(n, (sq,), back)


def stack(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [np.broadcast_to(value(x), np.shape(value(items[0]))) for x in items]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out

    def back(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if isinstance(x, Var) else None for i, x in enumerate(items))

    return tape._record(out, tuple(x if isinstance(x, Var) else None for x in items), back)


def total(x):
    """Sum of all entries (a scalar)."""
    if not isinstance(x, Var):
        return np.sum(x)
    shape = x.value.shape
    return x.tape._record(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x):
    if not isinstance(x, Var):
        return np.mean(x)
    shape = x.value.shape
    n = x.value.size
    return x.tape._record(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / n, shape),))


# -- ghost-cell padding -----------------------------------------------------

PAD_MODES = ("linear", "edge")


def _pad_axis(a: np.ndarray, axis: int, mode: str) -> np.ndarray:
    lo = np.take(a, [0], axis=axis)
    hi = np.take(a, [-1], axis=axis)
    if mode == "linear":
        lo = 2.0 * lo - np.take(a, [1], axis=axis)
        hi = 2.0 * hi - np.take(a, [-2], axis=axis)
    elif mode != "edge":
        raise ValueError(f"unknown pad mode {mode!r}")
    return np.concatenate([lo, a, hi], axis=axis)


def _pad_axis_adjoint(g: np.ndarray, axis: int, mode: str) -> np.ndarray:
    n = g.shape[axis]
    inner = np.take(g, range(1, n - 1), axis=axis).copy()
    glo = np.take(g, [0], axis=axis)
    ghi = np.take(g, [n - 1], axis=axis)
    sl = [slice(None)] * g.ndim

    def add(pos, contrib):
        sl[axis] = slice(pos, pos + 1) if pos >= 0 else slice(pos, pos + 1 or None)
        inner[tuple(sl)] += contrib

    if mode == "edge":
        add(0, glo)
        add(-1, ghi)
    else:
        add(0, 2.0 * glo)
        add(1, -glo)
        add(-1, 2.0 * ghi)
        add(-2, -ghi)
    return inner


def pad(x, mode: str = "linear", axes: Iterable[int] | None = None):
    """Add one ghost layer on each side of every axis in ``axes``.

    ``linear`` extrapolates (so differences at a face become one-sided);
    ``edge`` copies the boundary cell, a zero normal derivative across the face.
    Axes are padded in order, which also defines the corner ghosts.
    """
    xv = value(x)
    axes = tuple(range(xv.ndim)) if axes is None else tuple(axes)
    out = xv
    for ax in axes:
        out = _pad_axis(out, ax, mode)
    if not isinstance(x, Var):
        return out

    def back(g):
        for ax in reversed(axes):
            g = _pad_axis_adjoint(g, ax, mode)
        return (g,)

    return x.tape._record(out, (x,), back)
