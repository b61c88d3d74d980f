"""Evaluation metrics: relative errors, diffusion scalar maps and region contrasts."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .fields import (ConcentrationSeries, Grid, ScalarField, TensorField, VectorField,
                     tensor_entry_index)
from .representation import EigenDecomp, eig_sym

__all__ = [
    "RAE_FLOOR",
    "RegionMask",
    "rae",
    "eigvec_rae",
    "trace_map",
    "fa_map",
    "principal_orientation",
    "cbo_map",
    "rel_mean",
    "abs_t",
    "angle_dev",
    "write_rows_csv",
    "write_rows_json",
]

RAE_FLOOR = 1e-12


@dataclass(frozen=True)
class RegionMask:
    grid: Grid
    member: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.member, dtype=bool)
        if m.shape != tuple(self.grid.dims):
            raise ValueError(f"mask shape {m.shape} does not match grid {self.grid.dims}")
        m.setflags(write=False)
        object.__setattr__(self, "member", m)

    @property
    def count(self) -> int:
        return int(self.member.sum())

    def values(self, f: ScalarField) -> np.ndarray:
        if f.grid != self.grid:
            raise ValueError("map and region live on different grids")
        return f.data[self.member]


def _cellwise_norm(f) -> np.ndarray:
    if isinstance(f, ScalarField):
        return np.abs(f.data)
    if isinstance(f, VectorField):
        return np.sqrt(np.sum(f.components ** 2, axis=0))
    if isinstance(f, TensorField):
        w = np.array([1.0 if r == c else 2.0 for r, c in tensor_entry_index(f.grid.ndim)])
        return np.sqrt(np.tensordot(w, f.entries ** 2, axes=1))
    if isinstance(f, ConcentrationSeries):
        return np.abs(f.to_array())
    raise TypeError(f"unsupported field type {type(f).__name__}")


def _difference(a, b):
    if isinstance(a, ScalarField):
        return ScalarField(a.grid, a.data - b.data)
    if isinstance(a, VectorField):
        return VectorField(a.grid, a.components - b.components)
    if isinstance(a, TensorField):
        return TensorField(a.grid, a.entries - b.entries)
    return ConcentrationSeries.from_array(a.grid, a.to_array() - b.to_array(), a.dt, a.t0)


def rae(truth, estimate, region=None) -> float:
    """Mean over cells of ``||F - F_hat|| / ||F||`` (absolute, 2-norm or Frobenius).

    Cells whose truth norm is below ``RAE_FLOOR`` are left out of the mean.
    ``region`` (a ``RegionMask`` or boolean grid array) restricts the mean to
    its cells; for series it applies to every frame.
    """
    if type(truth) is not type(estimate):
        raise TypeError("truth and estimate are different kinds of field")
    if truth.grid != estimate.grid:
        raise ValueError("truth and estimate live on different grids")
    if isinstance(truth, ConcentrationSeries) and truth.n_frames != estimate.n_frames:
        raise ValueError("series have different frame counts")
    den = _cellwise_norm(truth)
    num = _cellwise_norm(_difference(truth, estimate))
    keep = den >= RAE_FLOOR
    if region is not None:
        member = region.member if isinstance(region, RegionMask) else np.asarray(region, dtype=bool)
        if member.shape != tuple(truth.grid.dims):
            raise ValueError(f"region shape {member.shape} does not match grid {truth.grid.dims}")
        keep = keep & member
    if not np.any(keep):
        raise ValueError("undefined RAE: every truth cell is zero")
    return float(np.mean(num[keep] / den[keep]))


def _as_eig(x) -> EigenDecomp:
    return x if isinstance(x, EigenDecomp) else eig_sym(x)


def eigvec_rae(truth, estimate) -> float:
    """Sign-agnostic eigenvector error: mean of ``sum_i min ||u_i -+ u_hat_i|| / ||U||_F``."""
    a, b = _as_eig(truth), _as_eig(estimate)
    if a.grid != b.grid:
        raise ValueError("truth and estimate live on different grids")
    n = a.grid.ndim
    minus = np.sqrt(np.sum((a.eigvecs - b.eigvecs) ** 2, axis=1))
    plus = np.sqrt(np.sum((a.eigvecs + b.eigvecs) ** 2, axis=1))
    return float(np.mean(np.sum(np.minimum(minus, plus), axis=0)) / math.sqrt(n))


def trace_map(d: Union[TensorField, EigenDecomp]) -> ScalarField:
    """Sum of eigenvalues per cell."""
    if isinstance(d, EigenDecomp):
        return ScalarField(d.grid, np.sum(d.eigvals, axis=0))
    idx = [k for k, (r, c) in enumerate(tensor_entry_index(d.grid.ndim)) if r == c]
    return ScalarField(d.grid, np.sum(d.entries[idx], axis=0))


def fa_map(eig: Union[TensorField, EigenDecomp]) -> ScalarField:
    """Fractional anisotropy per cell, in [0, 1]; all-zero cells map to 0.

    On 2D grids the third eigenvalue is taken as 0 (a desk-scale extension).
    """
    eig = _as_eig(eig)
    lam = eig.eigvals
    if eig.grid.ndim == 2:
        lam = np.concatenate([lam, np.zeros((1, *eig.grid.dims))])
    l1, l2, l3 = lam
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = l1 ** 2 + l2 ** 2 + l3 ** 2
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return ScalarField(eig.grid, np.clip(np.sqrt(0.5 * ratio), 0.0, 1.0))


def principal_orientation(eig: Union[TensorField, EigenDecomp]) -> VectorField:
    eig = _as_eig(eig)
    return VectorField(eig.grid, eig.eigvecs[0])


def cbo_map(eig: Union[TensorField, EigenDecomp]) -> VectorField:
    """Color-by-orientation: ``FA * |u_prin|`` per channel."""
    eig = _as_eig(eig)
    fa = fa_map(eig).data
    return VectorField(eig.grid, fa[None] * np.abs(eig.eigvecs[0]))


def _region_values(m: ScalarField, region: RegionMask, name: str) -> np.ndarray:
    vals = region.values(m)
    if vals.size == 0:
        raise ValueError(f"{name} region is empty")
    return vals


def rel_mean(m: ScalarField, lesion: RegionMask, clesion: RegionMask) -> float:
    """``min(a/b, b/a)`` of the two region means; both means must be positive."""
    a = float(np.mean(_region_values(m, lesion, "lesion")))
    b = float(np.mean(_region_values(m, clesion, "c-lesion")))
    if a <= 0 or b <= 0:
        raise ValueError("relative mean needs positive region means")
    return min(a / b, b / a)


def abs_t(m: ScalarField, lesion: RegionMask, clesion: RegionMask) -> float:
    """Absolute Welch (unequal variance) t statistic between the two regions."""
    a = _region_values(m, lesion, "lesion")
    b = _region_values(m, clesion, "c-lesion")
    if a.size < 2 or b.size < 2:
        raise ValueError("degenerate t: each region needs at least 2 cells")
    se2 = np.var(a, ddof=1) / a.size + np.var(b, ddof=1) / b.size
    diff = float(np.mean(a) - np.mean(b))
    if se2 == 0:
        if diff == 0:
            raise ValueError("degenerate t: zero variance and equal means")
        warnings.warn("both regions have zero variance; t is infinite", RuntimeWarning)
        return math.inf
    return abs(diff) / math.sqrt(se2)


def angle_dev(u: VectorField, lesion: RegionMask, mirror: Sequence[int]) -> float:
    """Mean angle in degrees between ``u`` at lesion cells and at their mirror cells.

    ``mirror`` lists, for each lesion cell in storage order, the flat index of
    its counterpart. Orientation sign is ignored, so the result is in [0, 90].
    """
    if u.grid != lesion.grid:
        raise ValueError("orientation field and region live on different grids")
    src = np.flatnonzero(lesion.member.ravel())
    if src.size == 0:
        raise ValueError("lesion region is empty")
    dst = np.asarray(mirror, dtype=np.int64).ravel()
    if dst.shape != src.shape:
        raise ValueError("mirror map must give one counterpart per lesion cell")
    flat = u.components.reshape(u.grid.ndim, -1)
    a, b = flat[:, src], flat[:, dst]
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero orientation vector in region")
    cos = np.clip(np.abs(np.sum(a * b, axis=0)) / (na * nb), 0.0, 1.0)
    return float(np.mean(np.degrees(np.arccos(cos))))


def write_rows_csv(rows: Sequence[dict], path) -> None:
    """Rows keyed by ``sample`` and ``metric``; values written with full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "metric", "value"])
        for r in rows:
            w.writerow([r["sample"], r["metric"], repr(float(r["value"]))])


def write_rows_json(rows: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump([{"sample": r["sample"], "metric": r["metric"], "value": float(r["value"])}
                   for r in rows], fh, indent=2)
        fh.write("\n")
