"""Losses on the physics parameters and their reverse-mode gradients.

Direct losses compare the parameterized velocity and diffusion fields with
known targets; latent losses compare a simulated concentration window with
observed frames. Gradients are exact derivatives of the discrete losses,
obtained by taping the whole forward computation (curl, Cayley map, tensor
assembly, every Runge-Kutta stage) and sweeping it backwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .fields import ConcentrationSeries, Grid, TensorField, VectorField, tensor_entry_index
from .representation import (EigenDecomp, PhysicsParams, curl_arrays, eig_sym, n_potential,
                             potential_mask, tensor_entries_from_params)
from .solver import (StabilityError, choose_dt_sub, included_mask, integrate_arrays, stability,
                     _substeps)
from .stencils import central_all

__all__ = [
    "DirectLossReport",
    "LatentLossReport",
    "GradientBundle",
    "GradcheckConfig",
    "physics_arrays",
    "direct_loss",
    "latent_loss",
    "value_and_grad",
    "grad",
    "gradcheck",
    "latent_dt_sub",
]

W_ULA = 0.5
W_GRAD = 0.5
W_SS = 0.1
# norms at or below this are treated as exactly zero when differentiating
# (the zero subgradient), so roundoff residuals at an optimum give no push
NORM_EPS = 1e-12


@dataclass(frozen=True)
class DirectLossReport:
    l_vd: float
    l_ula: float
    total: float
    w_ula: float


@dataclass(frozen=True)
class LatentLossReport:
    l_cc: float
    l_ss: float
    total: float
    w_grad: float
    w_ss: float


@dataclass(frozen=True)
class GradientBundle:
    """Gradient arrays shaped like ``PhysicsParams.arrays()``."""

    d_psi: np.ndarray
    d_b: np.ndarray
    d_lam_raw: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"psi": self.d_psi, "b": self.d_b, "lam_raw": self.d_lam_raw}

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.as_dict().values())))

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(self.d_psi + other.d_psi, self.d_b + other.d_b,
                              self.d_lam_raw + other.d_lam_raw)

    def scaled(self, w: float) -> "GradientBundle":
        return GradientBundle(w * self.d_psi, w * self.d_b, w * self.d_lam_raw)


# -- shared forward pieces ---------------------------------------------------

def physics_arrays(psi, b, lam_raw, grid: Grid, bc: str = "normal"):
    """Velocity components, tensor entries, Cayley ``U`` entries and rectified eigenvalues.

    Works on plain or taped ``(components, *dims)`` arrays. The boundary
    mask of the potential is applied here so that masked coordinates get an
    exactly zero gradient.
    """
    n = grid.ndim
    mask = potential_mask(grid, bc)
    psi_c = [psi[i] * mask[i] for i in range(n_potential(n))]
    v = curl_arrays(psi_c, grid.spacing)
    entries, u, lam = tensor_entries_from_params([b[i] for i in range(len(b))],
                                                 [lam_raw[i] for i in range(n)])
    return v, entries, u, lam


def _select(idx: np.ndarray, items):
    """Per-cell pick ``items[idx]`` with a constant index array."""
    out = items[-1]
    for i in range(len(items) - 2, -1, -1):
        out = ad.where(idx == i, items[i], out)
    return out


def _direct_parts(psi, b, lam_raw, grid, bc, v_gt: VectorField, d_gt: TensorField,
                  eig_gt: EigenDecomp):
    n = grid.ndim
    v, entries, u, lam = physics_arrays(psi, b, lam_raw, grid, bc)

    dv = ad.safe_norm([v_gt.components[i] - v[i] for i in range(n)], NORM_EPS)
    diffs = []
    for k, (r, c) in enumerate(tensor_entry_index(n)):
        diff = d_gt.entries[k] - entries[k]
        diffs.append(diff if r == c else diff * math.sqrt(2.0))  # off-diagonals appear twice
    dd = ad.safe_norm(diffs, NORM_EPS)
    l_vd = ad.mean(dv + dd)

    # predicted eigenpairs come from the parameterization itself, sorted descending
    order = np.argsort(-np.stack([ad.value(x) for x in lam]), axis=0, kind="stable")
    lam_sorted = [_select(order[k], lam) for k in range(n)]
    cols = [[u[comp][i] for comp in range(n)] for i in range(n)]  # column i of U
    vec_sorted = [[_select(order[k], [cols[i][comp] for i in range(n)]) for comp in range(n)]
                  for k in range(n)]
    vec_term = None
    for k in range(n):
        gt = eig_gt.eigvecs[k]
        minus = ad.safe_norm([gt[c] - vec_sorted[k][c] for c in range(n)], NORM_EPS)
        plus = ad.safe_norm([gt[c] + vec_sorted[k][c] for c in range(n)], NORM_EPS)
        t = ad.minimum(minus, plus)
        vec_term = t if vec_term is None else vec_term + t
    lam_term = ad.safe_norm([eig_gt.eigvals[k] - lam_sorted[k] for k in range(n)], NORM_EPS)
    l_ula = ad.mean(vec_term + lam_term)
    return {"l_vd": l_vd, "l_ula": l_ula}


def latent_dt_sub(params: PhysicsParams, frame_dt: float) -> float:
    """Substep for ``params``: the largest even split of ``frame_dt`` that is stable."""
    v, d = params.velocity(), params.diffusion()
    return choose_dt_sub(frame_dt, stability(v, d, params.grid, frame_dt).max_stable_dt)


def _latent_parts(psi, b, lam_raw, grid, bc, observed: ConcentrationSeries, n_out: int,
                  w_grad: float, dt_sub: Optional[float], ring: int, cross: str):
    if observed.grid != grid:
        raise ValueError("observed series and parameters live on different grids")
    if n_out < 2 or n_out > observed.n_frames:
        raise ValueError(f"n_out={n_out} needs 2 <= n_out <= {observed.n_frames} observed frames")
    spacing = grid.spacing
    v, entries, _, _ = physics_arrays(psi, b, lam_raw, grid, bc)
    v_val = np.stack([ad.value(x) for x in v])
    d_val = np.stack([ad.value(x) for x in entries])
    if dt_sub is None:
        dt_sub = choose_dt_sub(observed.dt, stability(v_val, d_val, grid, observed.dt).max_stable_dt)
    report = stability(v_val, d_val, grid, dt_sub)
    if not report.ok:
        raise StabilityError(f"unstable at dt_sub={dt_sub}: CFL={report.cfl_number:.4g}, "
                             f"Fourier={report.fourier_number:.4g}")
    obs = [f.data for f in observed.frames[:n_out]]
    frames, _ = integrate_arrays(obs[0], v, entries, spacing, n_out, _substeps(observed.dt, dt_sub),
                                 dt_sub, mode="edge", dirichlet=obs, boundary=grid.boundary_mask(),
                                 cross=cross, record_error=False)

    include = included_mask(grid, ring)
    n_inc = int(include.sum())
    if n_inc == 0:
        raise ValueError("no cells left after discarding the boundary ring")
    l_cc = None
    for target, pred in zip(obs, frames):
        err = ad.square(target - pred)
        if w_grad:
            for g_obs, g_pred in zip(central_all(target, spacing), central_all(pred, spacing)):
                err = err + w_grad * ad.square(g_obs - g_pred)
        per = ad.total(ad.where(include, err, 0.0)) / n_inc
        l_cc = per if l_cc is None else l_cc + per
    l_cc = l_cc / n_out

    ss = None
    for comp in v:
        for g in central_all(comp, spacing):
            ss = ad.square(g) if ss is None else ss + ad.square(g)
    for k, (r, c) in enumerate(tensor_entry_index(grid.ndim)):
        weight = 1.0 if r == c else 2.0
        for g in central_all(entries[k], spacing):
            ss = ss + weight * ad.square(g)
    l_ss = ad.mean(ss)
    return {"l_cc": l_cc, "l_ss": l_ss, "dt_sub": dt_sub}


# -- public losses -----------------------------------------------------------

def _prepare_direct(params, v_gt, d_gt):
    if v_gt.grid != params.grid or d_gt.grid != params.grid:
        raise ValueError("targets and parameters live on different grids")
    return eig_sym(d_gt)


def direct_loss(params: PhysicsParams, v_gt: VectorField, d_gt: TensorField,
                w_ula: float = W_ULA) -> DirectLossReport:
    """Field misfit plus eigenvector/eigenvalue misfit (sign-agnostic per eigenvector)."""
    eig_gt = _prepare_direct(params, v_gt, d_gt)
    a = params.arrays()
    parts = _direct_parts(a["psi"], a["b"], a["lam_raw"], params.grid, params.psi.bc,
                          v_gt, d_gt, eig_gt)
    l_vd, l_ula = float(parts["l_vd"]), float(parts["l_ula"])
    return DirectLossReport(l_vd, l_ula, l_vd + w_ula * l_ula, w_ula)


def latent_loss(params: PhysicsParams, observed: ConcentrationSeries, n_out: Optional[int] = None,
                w_grad: float = W_GRAD, w_ss: float = W_SS, dt_sub: Optional[float] = None,
                ring: int = 1, cross: str = "symmetric") -> LatentLossReport:
    """Concentration collocation misfit (values and gradients) plus a smoothness penalty.

    ``n_out`` defaults to every observed frame. Frame 0 is part of the
    collocation average (it matches by construction).
    """
    n_out = observed.n_frames if n_out is None else n_out
    a = params.arrays()
    parts = _latent_parts(a["psi"], a["b"], a["lam_raw"], params.grid, params.psi.bc, observed,
                          n_out, w_grad, dt_sub, ring, cross)
    l_cc, l_ss = float(parts["l_cc"]), float(parts["l_ss"])
    return LatentLossReport(l_cc, l_ss, l_cc + w_ss * l_ss, w_grad, w_ss)


def value_and_grad(kind: str, params: PhysicsParams, *args, part: str = "total", **kwargs):
    """Loss report and the gradient of one of its scalars (``total`` by default).

    ``kind`` is ``"direct"`` (args: ``v_gt, d_gt[, w_ula]``) or ``"latent"``
    (args: ``observed[, n_out, w_grad, w_ss, dt_sub, ring, cross]``).
    """
    tape = ad.Tape()
    arrays = params.arrays()
    leaves = {k: tape.var(a) for k, a in arrays.items()}
    grid, bc = params.grid, params.psi.bc

    if kind == "direct":
        names = ("v_gt", "d_gt", "w_ula")
        opts = dict(zip(names, args), **kwargs)
        v_gt, d_gt = opts["v_gt"], opts["d_gt"]
        w_ula = opts.get("w_ula", W_ULA)
        parts = _direct_parts(leaves["psi"], leaves["b"], leaves["lam_raw"], grid, bc,
                              v_gt, d_gt, _prepare_direct(params, v_gt, d_gt))
        parts["total"] = parts["l_vd"] + w_ula * parts["l_ula"]
        report = DirectLossReport(float(ad.value(parts["l_vd"])), float(ad.value(parts["l_ula"])),
                                  float(ad.value(parts["total"])), w_ula)
    elif kind == "latent":
        names = ("observed", "n_out", "w_grad", "w_ss", "dt_sub", "ring", "cross")
        opts = dict(zip(names, args), **kwargs)
        observed = opts["observed"]
        n_out = opts.get("n_out") or observed.n_frames
        w_grad = opts.get("w_grad", W_GRAD)
        w_ss = opts.get("w_ss", W_SS)
        parts = _latent_parts(leaves["psi"], leaves["b"], leaves["lam_raw"], grid, bc, observed,
                              n_out, w_grad, opts.get("dt_sub"), opts.get("ring", 1),
                              opts.get("cross", "symmetric"))
        parts["total"] = parts["l_cc"] + w_ss * parts["l_ss"]
        report = LatentLossReport(float(ad.value(parts["l_cc"])), float(ad.value(parts["l_ss"])),
                                  float(ad.value(parts["total"])), w_grad, w_ss)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    target = parts[part]
    if not ad.is_var(target):  # the chosen part does not depend on the parameters
        zero = {k: np.zeros_like(a) for k, a in arrays.items()}
        return report, GradientBundle(zero["psi"], zero["b"], zero["lam_raw"])
    g = tape.gradient(target, [leaves["psi"], leaves["b"], leaves["lam_raw"]])
    return report, GradientBundle(*g)


def grad(kind: str, params: PhysicsParams, *args, **kwargs) -> GradientBundle:
    return value_and_grad(kind, params, *args, **kwargs)[1]


# -- finite-difference check -------------------------------------------------

@dataclass
class GradcheckConfig:
    kind: str = "latent"
    n_coords: int = 256
    h: float = 1e-5
    tol: float = 1e-5
    min_grad: float = 1e-10
    seed: int = 0


def _loss_value(kind, params, args, kwargs) -> float:
    if kind == "direct":
        return direct_loss(params, *args, **kwargs).total
    return latent_loss(params, *args, **kwargs).total


def gradcheck(params: PhysicsParams, config: GradcheckConfig, *args, **kwargs) -> dict:
    """Compare taped gradients with central differences on a random coordinate subset.

    Coordinates whose analytic gradient is below ``config.min_grad`` in
    magnitude are skipped. For latent losses the substep is frozen at the
    value chosen for ``params`` so that both sides see the same scheme.
    """
    if config.n_coords <= 0:
        raise ValueError("empty check")
    if config.kind == "latent" and kwargs.get("dt_sub") is None:
        observed = args[0] if args else kwargs["observed"]
        kwargs = dict(kwargs, dt_sub=latent_dt_sub(params, observed.dt))
    _, g = value_and_grad(config.kind, params, *args, **kwargs)
    arrays = params.arrays()
    keys = list(arrays)
    sizes = [arrays[k].size for k in keys]
    grads = np.concatenate([g.as_dict()[k].ravel() for k in keys])
    candidates = np.flatnonzero(np.abs(grads) >= config.min_grad)
    if candidates.size == 0:
        raise ValueError("empty check")
    rng = np.random.default_rng(config.seed)
    pick = np.sort(rng.choice(candidates, size=min(config.n_coords, candidates.size), replace=False))
    offsets = np.cumsum([0] + sizes)

    rel = []
    for flat in pick:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        key, local = keys[which], flat - offsets[which]
        vals = []
        for sign in (1.0, -1.0):
            pert = {k: a.copy() for k, a in arrays.items()}
            pert[key].flat[local] += sign * config.h
            p = PhysicsParams.from_arrays(params.grid, bc=params.psi.bc, **pert)
            vals.append(_loss_value(config.kind, p, args, kwargs))
        fd = (vals[0] - vals[1]) / (2.0 * config.h)
        rel.append(abs(fd - grads[flat]) / abs(grads[flat]))
    rel = np.asarray(rel)
    max_rel = float(rel.max())
    return {"max_rel_err": max_rel, "mean_rel_err": float(rel.mean()), "n_checked": int(rel.size),
            "pass": bool(max_rel <= config.tol)}
