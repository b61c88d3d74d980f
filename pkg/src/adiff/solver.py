"""Discrete advection-diffusion right-hand side and explicit time integration.

``dC/dt = -V . grad C + div(D grad C)`` with first-order upwind advection and
the expanded diffusion form: central differences for the first-order products
and nested forward/backward differences for the second-order terms. Time
stepping is fixed-step Dormand-Prince 4(5); the embedded error estimate is
kept as a diagnostic only.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .fields import ConcentrationSeries, Grid, ScalarField, TensorField, VectorField, tensor_entry_index
from .stencils import central, shifted, shifted2

__all__ = [
    "C_MAX",
    "FOURIER_MAX",
    "StabilityError",
    "StabilityReport",
    "BCKind",
    "BoundarySpec",
    "advection_rhs",
    "diffusion_rhs",
    "adv_diff_rhs",
    "rhs_arrays",
    "stability",
    "choose_dt_sub",
    "apply_bc",
    "integrate",
    "integrate_arrays",
    "predict_window",
]

C_MAX = 1.0
FOURIER_MAX = 0.5
SAFETY = 0.8


class StabilityError(RuntimeError):
    pass


# -- right-hand side -------------------------------------------------------

def advection_rhs_arrays(c, v: Sequence, spacing, mode: str = "linear"):
    p = ad.pad(c, mode)
    out = None
    for ax, h in enumerate(spacing):
        back = (c - shifted(p, ax, -1)) / h
        fwd = (shifted(p, ax, 1) - c) / h
        deriv = ad.where(ad.value(v[ax]) >= 0, back, fwd)
        term = v[ax] * deriv
        out = -term if out is None else out - term
    return out


def diffusion_rhs_arrays(c, d_entries: Sequence, spacing, mode: str = "linear",
                         cross: str = "symmetric"):
    n = len(spacing)
    index = tensor_entry_index(n)
    dmat = [[None] * n for _ in range(n)]
    for k, (r, col) in enumerate(index):
        dmat[r][col] = dmat[col][r] = d_entries[k]

    p = ad.pad(c, mode)
    grad_c = [(shifted(p, ax, 1) - shifted(p, ax, -1)) / (2.0 * h) for ax, h in enumerate(spacing)]

    # (a): sum_b (sum_a dD_ab/da) dC/db, all central
    out = None
    for b in range(n):
        div_b = None
        for a, h in enumerate(spacing):
            t = central(dmat[a][b], a, h)
            div_b = t if div_b is None else div_b + t
        term = div_b * grad_c[b]
        out = term if out is None else out + term

    # (b): D_aa d2C/da2 + 2 D_ab d2C/dadb
    for a, h in enumerate(spacing):
        second = (shifted(p, a, 1) - 2.0 * c + shifted(p, a, -1)) / (h * h)
        out = out + dmat[a][a] * second
    for a in range(n):
        for b in range(a + 1, n):
            hh = spacing[a] * spacing[b]
            # forward_a of backward_b
            fb = (shifted(p, a, 1) - shifted2(p, a, 1, b, -1) - c + shifted(p, b, -1))
            if cross == "symmetric":
                # backward_a of forward_b
                bf = (shifted(p, b, 1) - c - shifted2(p, a, -1, b, 1) + shifted(p, a, -1))
                mixed = (fb + bf) * (0.5 / hh)
            elif cross == "forward":
                mixed = fb / hh
            else:
                raise ValueError(f"unknown cross-derivative scheme {cross!r}")
            out = out + 2.0 * (dmat[a][b] * mixed)
    return out


def rhs_arrays(c, v, d_entries, spacing, mode: str = "linear", cross: str = "symmetric"):
    """Full right-hand side on plain or taped arrays. ``v`` / ``d_entries`` may be None."""
    out = None
    if v is not None:
        out = advection_rhs_arrays(c, v, spacing, mode)
    if d_entries is not None:
        t = diffusion_rhs_arrays(c, d_entries, spacing, mode, cross)
        out = t if out is None else out + t
    if out is None:
        out = c * 0.0
    return out


def _check_grid(*fields):
    grids = {f.grid for f in fields if f is not None}
    if len(grids) > 1:
        raise ValueError("fields live on different grids")


def advection_rhs(c: ScalarField, v: VectorField, mode: str = "linear") -> ScalarField:
    """``-sum_ax V^ax dC/dax`` with the upwind side chosen by the sign of ``V^ax``.

    ``mode="linear"`` falls back to the one-sided difference at faces;
    ``mode="edge"`` uses zero-flux mirror ghosts.
    """
    _check_grid(c, v)
    return ScalarField(c.grid, advection_rhs_arrays(c.data, list(v.components), c.grid.spacing, mode))


def diffusion_rhs(c: ScalarField, d: TensorField, mode: str = "linear",
                  cross: str = "symmetric") -> ScalarField:
    _check_grid(c, d)
    return ScalarField(c.grid, diffusion_rhs_arrays(c.data, list(d.entries), c.grid.spacing,
                                                    mode, cross))


def adv_diff_rhs(c: ScalarField, v: VectorField, d: TensorField, mode: str = "linear",
                 cross: str = "symmetric") -> ScalarField:
    _check_grid(c, v, d)
    return ScalarField(c.grid, rhs_arrays(c.data, list(v.components), list(d.entries),
                                          c.grid.spacing, mode, cross))


# -- stability -------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    cfl_number: float
    fourier_number: float
    max_stable_dt: float
    ok: bool


def _speeds(v, d, spacing):
    v = None if v is None else np.asarray(ad.value(v.components if isinstance(v, VectorField) else v))
    d = None if d is None else np.asarray(ad.value(d.entries if isinstance(d, TensorField) else d))
    adv = 0.0
    if v is not None:
        adv = float(np.max(sum(np.abs(v[ax]) / h for ax, h in enumerate(spacing))))
    diff = 0.0
    if d is not None:
        diag = [k for k, (r, c) in enumerate(tensor_entry_index(len(spacing))) if r == c]
        diff = float(np.max(sum(d[k] / (h * h) for k, h in zip(diag, spacing))))
    return adv, diff


def stability(v, d, grid: Grid, dt: float) -> StabilityReport:
    """CFL number ``max sum |V| dt / dx`` and mesh Fourier number ``max sum D_aa dt / dx^2``."""
    adv, diff = _speeds(v, d, grid.spacing)
    c = adv * dt
    f = diff * dt
    limits = []
    if adv > 0:
        limits.append(C_MAX / adv)
    if diff > 0:
        limits.append(FOURIER_MAX / diff)
    max_dt = SAFETY * min(limits) if limits else math.inf
    return StabilityReport(cfl_number=c, fourier_number=f, max_stable_dt=max_dt,
                           ok=bool(c <= C_MAX and f <= FOURIER_MAX))


def choose_dt_sub(frame_dt: float, max_stable_dt: float, max_substeps: int = 100000) -> float:
    """Largest ``frame_dt / n`` (n >= 1) not exceeding ``max_stable_dt``."""
    n = max(1, math.ceil(frame_dt / max_stable_dt - 1e-12)) if math.isfinite(max_stable_dt) else 1
    if n > max_substeps:
        raise StabilityError(f"would need {n} substeps per frame")
    return frame_dt / n


# -- boundary conditions ---------------------------------------------------

class BCKind(enum.Enum):
    ZERO_NEUMANN = "zero_neumann"
    CAUCHY_VIRTUAL = "cauchy_virtual"


@dataclass
class BoundarySpec:
    """Boundary treatment for integration.

    Both kinds evaluate stencils with mirrored (edge-copy) ghosts, i.e. zero
    normal derivative. ``CAUCHY_VIRTUAL`` additionally overwrites the boundary
    cells with observed values after every substep; between observed frames
    those values are interpolated linearly in time.
    """

    kind: BCKind = BCKind.ZERO_NEUMANN
    observed: Optional[list] = None  # arrays, one per frame time

    @classmethod
    def zero_neumann(cls) -> "BoundarySpec":
        return cls(BCKind.ZERO_NEUMANN)

    @classmethod
    def cauchy(cls, observed) -> "BoundarySpec":
        if isinstance(observed, ConcentrationSeries):
            frames = [f.data for f in observed.frames]
        else:
            frames = [f.data if isinstance(f, ScalarField) else np.asarray(f) for f in observed]
        return cls(BCKind.CAUCHY_VIRTUAL, frames)

    ghost_mode = "edge"


def apply_bc(c_pred: ScalarField, spec: BoundarySpec, observed_frame=None) -> ScalarField:
    """Impose ``spec`` on ``c_pred``.

    Zero-Neumann acts only through ghost cells during stencil evaluation, so the
    field is returned unchanged; Cauchy-virtual also copies ``observed_frame``
    onto the boundary cells.
    """
    if spec.kind is BCKind.ZERO_NEUMANN:
        return c_pred
    if observed_frame is None:
        raise ValueError("Cauchy virtual boundary needs an observed frame")
    obs = observed_frame.data if isinstance(observed_frame, ScalarField) else np.asarray(observed_frame)
    mask = c_pred.grid.boundary_mask()
    return ScalarField(c_pred.grid, np.where(mask, obs, c_pred.data))


def ghost_values(c: ScalarField, spec: BoundarySpec) -> np.ndarray:
    """``c`` with one ghost layer as seen by the stencils under ``spec``."""
    return ad.pad(c.data, spec.ghost_mode)


# -- Dormand-Prince 4(5) ---------------------------------------------------

_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _combine(y, ks, coeffs, dt):
    acc = None
    for k, a in zip(ks, coeffs):
        if a == 0.0:
            continue
        term = k * (dt * a)
        acc = term if acc is None else acc + term
    return y if acc is None else y + acc


def integrate_arrays(c0, v, d_entries, spacing, n_frames: int, substeps: int, dt_sub: float,
                     mode: str = "edge", dirichlet: Optional[Sequence[np.ndarray]] = None,
                     boundary: Optional[np.ndarray] = None, cross: str = "symmetric",
                     record_error: bool = True):
    """Integrate on plain or taped arrays; returns ``(frames, errors)``.

    ``dirichlet`` (one array per output frame) with ``boundary`` (bool mask)
    overwrites boundary cells after every substep.
    """
    def f(y):
        return rhs_arrays(y, v, d_entries, spacing, mode, cross)

    def f_plain(y):
        vv = None if v is None else [ad.value(x) for x in v]
        dd = None if d_entries is None else [ad.value(x) for x in d_entries]
        return rhs_arrays(y, vv, dd, spacing, mode, cross)

    y = c0
    if dirichlet is not None:
        y = ad.where(boundary, dirichlet[0], y)
    frames = [y]
    errors = [0.0]
    for j in range(1, n_frames):
        err = 0.0
        for s in range(substeps):
            ks = [f(y)]
            for a_row in _A[1:]:
                ks.append(f(_combine(y, ks, a_row, dt_sub)))
            y_new = _combine(y, ks, _B5, dt_sub)
            if record_error:
                k7 = f_plain(ad.value(y_new))
                kv = [ad.value(k) for k in ks] + [k7]
                diff = dt_sub * sum((b5 - b4) * k for b5, b4, k in zip(_B5 + (0.0,), _B4, kv))
                err = max(err, float(np.max(np.abs(diff))))
            if dirichlet is not None:
                w = (s + 1) / substeps
                target = dirichlet[j] if w == 1.0 else (1.0 - w) * dirichlet[j - 1] + w * dirichlet[j]
                y_new = ad.where(boundary, target, y_new)
            y = y_new
        if not np.all(np.isfinite(ad.value(y))):
            raise FloatingPointError(f"non-finite concentration at frame {j}")
        frames.append(y)
        errors.append(err)
    return frames, errors


def _substeps(frame_dt: float, dt_sub: float) -> int:
    n = round(frame_dt / dt_sub)
    if n < 1 or not math.isclose(n * dt_sub, frame_dt, rel_tol=1e-9, abs_tol=0.0):
        raise ValueError(f"dt_sub={dt_sub} does not divide the frame interval {frame_dt}")
    return n


def integrate(c0: ScalarField, v: Optional[VectorField], d: Optional[TensorField],
              spec: Optional[BoundarySpec] = None, t_span=(0.0, 1.0), dt_sub: float = None,
              frame_dt: float = None, cross: str = "symmetric") -> ConcentrationSeries:
    """Advance ``c0`` over ``t_span`` and emit a frame every ``frame_dt``.

    Refuses to run (``StabilityError``) if the CFL or mesh Fourier condition
    fails at ``dt_sub``. ``diagnostics["embedded_error"]`` holds, per frame, the
    largest 4th/5th-order discrepancy seen while reaching it.
    """
    spec = spec or BoundarySpec.zero_neumann()
    grid = c0.grid
    _check_grid(c0, v, d)
    t0, t1 = map(float, t_span)
    if frame_dt is None:
        raise ValueError("frame_dt is required")
    n_frames = int(round((t1 - t0) / frame_dt)) + 1
    if n_frames < 2:
        raise ValueError("t_span must cover at least one frame interval")
    report = stability(v, d, grid, dt_sub if dt_sub is not None else frame_dt)
    if dt_sub is None:
        dt_sub = choose_dt_sub(frame_dt, report.max_stable_dt)
        report = stability(v, d, grid, dt_sub)
    if not report.ok:
        raise StabilityError(
            f"unstable at dt_sub={dt_sub}: CFL={report.cfl_number:.4g}, "
            f"Fourier={report.fourier_number:.4g}")
    substeps = _substeps(frame_dt, dt_sub)
    dirichlet = boundary = None
    if spec.kind is BCKind.CAUCHY_VIRTUAL:
        if spec.observed is None or len(spec.observed) < n_frames:
            raise ValueError("Cauchy virtual boundary needs an observed frame per output time")
        dirichlet = spec.observed
        boundary = grid.boundary_mask()
    frames, errors = integrate_arrays(
        c0.data, None if v is None else list(v.components), None if d is None else list(d.entries),
        grid.spacing, n_frames, substeps, dt_sub, mode=spec.ghost_mode, dirichlet=dirichlet,
        boundary=boundary, cross=cross)
    series = ConcentrationSeries([ScalarField(grid, f) for f in frames], dt=frame_dt, t0=t0)
    series.diagnostics.update(embedded_error=errors, dt_sub=dt_sub, stability=report)
    return series


def included_mask(grid: Grid, ring: int = 1) -> np.ndarray:
    """Cells kept when comparing predictions: everything but the outer ``ring`` layers."""
    return ~grid.boundary_mask(ring) if ring > 0 else np.ones(grid.dims, dtype=bool)


def predict_window(params, observed: ConcentrationSeries, n_out: int, dt_sub: float = None,
                   ring: int = 1, cross: str = "symmetric") -> ConcentrationSeries:
    """Integrate from observed frame 0 over ``n_out`` frames with Cauchy-virtual boundaries.

    ``diagnostics["included"]`` marks the cells outside the discarded ring.
    """
    if n_out < 2 or n_out > observed.n_frames:
        raise ValueError(f"n_out={n_out} needs 2 <= n_out <= {observed.n_frames} observed frames")
    v = params.velocity()
    d = params.diffusion()
    spec = BoundarySpec.cauchy(observed.frames[:n_out])
    out = integrate(observed.frames[0], v, d, spec,
                    t_span=(observed.t0, observed.t0 + (n_out - 1) * observed.dt),
                    dt_sub=dt_sub, frame_dt=observed.dt, cross=cross)
    out.diagnostics["included"] = included_mask(observed.grid, ring)
    return out
