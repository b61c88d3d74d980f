"""Finite-difference stencils on ghost-padded arrays.

Every operator pads its input with one ghost layer per axis (see
:func:`adiff.autodiff.pad`) and then reads shifted views of the padded array,
so the same code works for plain arrays and taped values.
"""
from __future__ import annotations

from . import autodiff as ad


def shifted(padded, axis: int, offset: int):
    """View of ``padded`` (one ghost layer on every axis) shifted by ``offset`` along ``axis``."""
    nd = padded.ndim
    index = []
    for ax in range(nd):
        n = padded.shape[ax]
        lo = 1 + (offset if ax == axis else 0)
        index.append(slice(lo, n - 1 + (offset if ax == axis else 0)))
    return padded[tuple(index)]


def shifted2(padded, axis_a: int, off_a: int, axis_b: int, off_b: int):
    """Diagonal shift along two axes at once (corner ghosts included)."""
    index = []
    for ax in range(padded.ndim):
        n = padded.shape[ax]
        off = (off_a if ax == axis_a else 0) + (off_b if ax == axis_b else 0)
        index.append(slice(1 + off, n - 1 + off))
    return padded[tuple(index)]


def central(a, axis: int, h: float, mode: str = "linear"):
    """Central first difference; one-sided at faces under ``linear`` ghosts."""
    p = ad.pad(a, mode)
    return (shifted(p, axis, 1) - shifted(p, axis, -1)) / (2.0 * h)


def central_all(a, spacing, mode: str = "linear"):
    p = ad.pad(a, mode)
    return [(shifted(p, ax, 1) - shifted(p, ax, -1)) / (2.0 * h)
            for ax, h in enumerate(spacing)]
