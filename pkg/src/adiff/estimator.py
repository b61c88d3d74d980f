"""Optimization driver: Adam, patch sampling and splicing, latent-physics estimation.

Also hosts the two fitting problems on known fields: matching (V, D) targets
through the parameterization, and projecting a velocity field onto the
divergence-free (curl) range.
"""
from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from . import autodiff as ad
from .fields import ConcentrationSeries, Grid, ScalarField, TensorField, VectorField
from .objective import W_GRAD, W_SS, W_ULA, value_and_grad
from .representation import (PhysicsParams, PotentialField, curl, curl_arrays, n_potential,
                             potential_mask)

__all__ = [
    "OptimConfig",
    "LatentLossConfig",
    "AdamState",
    "EstimationDiverged",
    "PatchSpec",
    "learning_rate",
    "adam_step",
    "extract_patches",
    "tile_patches",
    "crop_series",
    "splice_patches",
    "estimate",
    "estimate_patches",
    "write_history",
    "FitResult",
    "fit_representation",
    "project_divfree",
]

PARAM_KEYS = ("psi", "b", "lam_raw")


class EstimationDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 1000
    seed: int = 0
    tol: float = 1e-9
    window: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.max_iters < 0 or self.window < 1:
            raise ValueError("decay_every, window must be >= 1 and max_iters >= 0")


@dataclass(frozen=True)
class LatentLossConfig:
    n_out: int = 10
    w_grad: float = W_GRAD
    w_ss: float = W_SS
    ring: int = 1
    cross: str = "symmetric"


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def like(cls, arrays: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def learning_rate(cfg: OptimConfig, iteration: int) -> float:
    """Step-decayed rate: ``lr * decay_factor ** (iteration // decay_every)``."""
    return cfg.lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def adam_step(state: AdamState, params: dict, grads: dict, iteration: int, cfg: OptimConfig):
    """One bias-corrected Adam update; returns ``(state, params)`` as new objects."""
    t = state.t + 1
    lr = learning_rate(cfg, iteration)
    m, v, out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, expected {p.shape}")
        m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        m_hat = m[k] / (1.0 - cfg.beta1 ** t)
        v_hat = v[k] / (1.0 - cfg.beta2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return AdamState(m, v, t), out


# -- patches -------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    """Sub-grid ``origin``/``size`` and the 1-based start frame ``t_start``."""

    size: tuple
    origin: tuple
    t_start: int = 1
    n_in: int = 10
    n_out: int = 10

    def __post_init__(self):
        if not 2 <= self.n_out <= self.n_in:
            raise ValueError("need 2 <= n_out <= n_in")
        if self.t_start < 1:
            raise ValueError("t_start is 1-based")

    def slices(self) -> tuple:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


def crop_series(series: ConcentrationSeries, spec: PatchSpec) -> ConcentrationSeries:
    """Frames ``t_start .. t_start + n_in - 1`` (1-based) restricted to the patch."""
    grid = series.grid
    if len(spec.size) != grid.ndim:
        raise ValueError("patch and series dimensionality differ")
    for o, s, n in zip(spec.origin, spec.size, grid.dims):
        if o < 0 or o + s > n:
            raise ValueError("patch does not fit in the domain")
    first = spec.t_start - 1
    if first + spec.n_in > series.n_frames:
        raise ValueError("patch window runs past the last frame")
    sub = Grid(tuple(spec.size), grid.spacing)
    sl = spec.slices()
    frames = [ScalarField(sub, f.data[sl]) for f in series.frames[first:first + spec.n_in]]
    return ConcentrationSeries(frames, series.dt, series.t0 + first * series.dt)


def _patch_size(grid: Grid, size) -> tuple:
    size = (size,) * grid.ndim if np.isscalar(size) else tuple(size)
    if len(size) != grid.ndim:
        raise ValueError("patch size and grid dimensionality differ")
    if any(s > n for s, n in zip(size, grid.dims)):
        raise ValueError(f"domain {grid.dims} is smaller than patch {size}")
    return tuple(int(s) for s in size)


def extract_patches(series: ConcentrationSeries, rng, count: int, size=32, n_in: int = 10,
                    n_out: int = 10):
    """Draw ``count`` random space-time patches (same spatial window across ``n_in`` frames)."""
    rng = np.random.default_rng(rng)
    size = _patch_size(series.grid, size)
    if n_in > series.n_frames:
        raise ValueError(f"n_in={n_in} exceeds the {series.n_frames} available frames")
    out = []
    for _ in range(count):
        origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(series.grid.dims, size))
        t_start = int(rng.integers(1, series.n_frames - n_in + 2))
        spec = PatchSpec(size, origin, t_start, n_in, n_out)
        out.append((crop_series(series, spec), spec))
    return out


def tile_patches(grid: Grid, size, t_start: int = 1, n_in: int = 10, n_out: int = 10):
    """Non-overlapping tiling of ``grid``; the patch size must divide every dimension."""
    size = _patch_size(grid, size)
    if any(n % s for n, s in zip(grid.dims, size)):
        raise ValueError(f"patch {size} does not tile domain {grid.dims} exactly")
    ranges = [range(0, n, s) for n, s in zip(grid.dims, size)]
    return [PatchSpec(size, origin, t_start, n_in, n_out) for origin in itertools.product(*ranges)]


def splice_patches(patch_results: Sequence, full_grid: Grid):
    """Assemble ``(PatchSpec, field)`` pairs into one field on ``full_grid``.

    Every cell must be covered exactly once.
    """
    if not patch_results:
        raise ValueError("coverage gap: no patches")
    def blocks(f):
        return f.array[None] if isinstance(f, ScalarField) else f.array

    kind = type(patch_results[0][1])
    n_comp = len(blocks(patch_results[0][1]))
    out = np.zeros((n_comp, *full_grid.dims))
    count = np.zeros(full_grid.dims, dtype=np.int64)
    for spec, f in patch_results:
        if type(f) is not kind or len(blocks(f)) != n_comp:
            raise ValueError("patches hold different field kinds")
        sl = spec.slices()
        if tuple(f.grid.dims) != tuple(spec.size):
            raise ValueError("patch field does not match its spec")
        count[sl] += 1
        out[(slice(None),) + sl] = blocks(f)
    if np.any(count > 1):
        raise ValueError("overlap: a cell is covered by more than one patch")
    if np.any(count == 0):
        raise ValueError("coverage gap: some cells belong to no patch")
    if kind is ScalarField:
        return ScalarField(full_grid, out[0])
    return kind(full_grid, out)


# -- latent estimation -------------------------------------------------------

def _initial(grid: Grid, init, bc: str, cfg: OptimConfig, noise: float) -> PhysicsParams:
    if isinstance(init, PhysicsParams):
        if init.grid != grid:
            raise ValueError("initial parameters and series live on different grids")
        return init
    if init in (None, "zero"):
        return PhysicsParams.zeros(grid, bc)
    if init == "noise":
        rng = np.random.default_rng(cfg.seed)
        z = PhysicsParams.zeros(grid, bc).arrays()
        return PhysicsParams.from_arrays(grid, bc=bc,
                                         **{k: noise * rng.standard_normal(a.shape)
                                            for k, a in z.items()})
    raise ValueError(f"unknown init {init!r}")


def estimate(observed: ConcentrationSeries, init=None, cfg: OptimConfig = OptimConfig(),
             loss: LatentLossConfig = LatentLossConfig(), bc: str = "normal",
             noise: float = 1e-2, callback=None):
    """Fit ``PhysicsParams`` to an observed series by Adam on the latent loss.

    Returns ``(best_params, history)``. Each history row holds the iteration,
    the loss parts, the best total so far and the learning rate. Stops at
    ``max_iters`` or when the best total improved by less than ``tol`` over
    the last ``window`` iterations.
    """
    grid = observed.grid
    params = _initial(grid, init, bc, cfg, noise)
    n_out = min(loss.n_out, observed.n_frames)
    arrays = {k: np.array(a) for k, a in params.arrays().items()}
    state = AdamState.like(arrays)
    best_params, best = params, math.inf
    history = []
    for it in range(cfg.max_iters + 1):
        current = PhysicsParams.from_arrays(grid, bc=bc, **arrays)
        try:
            report, g = value_and_grad("latent", current, observed, n_out=n_out,
                                       w_grad=loss.w_grad, w_ss=loss.w_ss, ring=loss.ring,
                                       cross=loss.cross)
        except (FloatingPointError, ad.NonFiniteGradientError) as exc:
            raise EstimationDiverged(f"iteration {it}: {exc}; best loss so far {best:.6g}") from exc
        if not math.isfinite(report.total):
            raise EstimationDiverged(f"iteration {it}: non-finite loss; best so far {best:.6g}")
        if report.total < best:
            best, best_params = report.total, current
        lr = learning_rate(cfg, it)
        history.append({"iter": it, "l_cc": report.l_cc, "l_ss": report.l_ss,
                        "total": report.total, "best": best, "lr": lr})
        if callback is not None:
            callback(it, current, report)
        if it == cfg.max_iters:
            break
        if it >= cfg.window and history[it - cfg.window]["best"] - best < cfg.tol:
            break
        state, arrays = adam_step(state, arrays, g.as_dict(), it, cfg)
    return best_params, history


def write_history(history: Sequence[dict], path) -> None:
    cols = ["iter", "l_cc", "l_ss", "total", "lr"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["iter"]] + [repr(float(row[c])) for c in cols[1:]])


def _estimate_one(args):
    patch, spec, init, cfg, loss, bc = args
    params, history = estimate(patch, init, cfg, loss, bc)
    return spec, params, history


def estimate_patches(observed: ConcentrationSeries, size, cfg: OptimConfig = OptimConfig(),
                     loss: LatentLossConfig = LatentLossConfig(), bc: str = "normal",
                     n_in: Optional[int] = None, jobs: int = 1):
    """Estimate on an exact tiling of the domain and splice the derived V and D.

    Each tile sees Cauchy-virtual boundaries from its own observed frames.
    Tiles are independent, so ``jobs > 1`` runs them in worker processes
    with identical results.
    """
    n_in = observed.n_frames if n_in is None else n_in
    specs = tile_patches(observed.grid, size, 1, n_in, min(loss.n_out, n_in))
    tasks = [(crop_series(observed, s), s, None, cfg, loss, bc) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_estimate_one, tasks))
    else:
        results = [_estimate_one(t) for t in tasks]
    v = splice_patches([(s, p.velocity()) for s, p, _ in results], observed.grid)
    d = splice_patches([(s, p.diffusion()) for s, p, _ in results], observed.grid)
    return v, d, results


# -- fitting known fields ----------------------------------------------------

@dataclass
class FitResult:
    params: PhysicsParams
    loss: float
    l_vd: float
    converged: bool
    history: list = field(default_factory=list)


def fit_representation(v_target: VectorField, d_target: TensorField,
                       cfg: OptimConfig = OptimConfig(lr=0.05, max_iters=3000,
                                                        decay_every=1000, tol=0.0),
                       w_ula: float = W_ULA, bc: str = "normal", init=None,
                       target_loss: float = 1e-8) -> FitResult:
    """Find (psi, B, lam_raw) whose curl and tensor match the targets under the direct loss.

    Runs Adam from ``init`` (zeros by default) and keeps the best iterate.
    ``converged`` says whether the direct loss reached ``target_loss``;
    failing to get there is reported, not raised.
    """
    grid = v_target.grid
    if d_target.grid != grid:
        raise ValueError("targets live on different grids")
    params = _initial(grid, init, bc, cfg, 0.0)
    arrays = {k: np.array(a) for k, a in params.arrays().items()}
    state = AdamState.like(arrays)
    best, best_params, best_report = math.inf, params, None
    history = []
    for it in range(cfg.max_iters + 1):
        current = PhysicsParams.from_arrays(grid, bc=bc, **arrays)
        report, g = value_and_grad("direct", current, v_target, d_target, w_ula)
        if report.total < best:
            best, best_params, best_report = report.total, current, report
        history.append({"iter": it, "l_vd": report.l_vd, "l_ula": report.l_ula,
                        "total": report.total, "best": best})
        if best <= target_loss or it == cfg.max_iters:
            break
        if it >= cfg.window and history[it - cfg.window]["best"] - best < cfg.tol:
            break
        state, arrays = adam_step(state, arrays, g.as_dict(), it, cfg)
    return FitResult(best_params, best, best_report.l_vd, best <= target_loss, history)


def _curl_operator(grid: Grid, bc: str):
    alpha = n_potential(grid.ndim)
    mask = potential_mask(grid, bc)
    shape_in = (alpha, *grid.dims)
    shape_out = (grid.ndim, *grid.dims)

    def matvec(x):
        psi = x.reshape(shape_in) * mask
        return np.stack(curl_arrays(list(psi), grid.spacing)).ravel()

    def rmatvec(y):
        tape = ad.Tape()
        psi = tape.var(np.zeros(shape_in))
        comps = curl_arrays([psi[i] * mask[i] for i in range(alpha)], grid.spacing)
        w = y.reshape(shape_out)
        inner = None
        for i, c in enumerate(comps):
            t = ad.total(c * w[i])
            inner = t if inner is None else inner + t
        return tape.gradient(inner, [psi])[0].ravel()

    n_in, n_out = int(np.prod(shape_in)), int(np.prod(shape_out))
    return LinearOperator((n_out, n_in), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)


def project_divfree(v: VectorField, bc: str = "normal", atol: float = 1e-14,
                    max_iters: Optional[int] = None):
    """Least-squares projection of ``v`` onto the range of the discrete curl.

    Solves ``min_psi ||curl(psi) - v||^2`` (a linear problem) with LSQR and
    returns ``(curl(psi*), psi*)``. The output is divergence-free by
    construction whatever the input.
    """
    grid = v.grid
    op = _curl_operator(grid, bc)
    sol = lsqr(op, v.components.ravel(), atol=atol, btol=atol,
               iter_lim=max_iters or 20 * op.shape[1])
    psi = PotentialField(grid, sol[0].reshape((n_potential(grid.ndim), *grid.dims)), bc)
    return curl(psi), psi
