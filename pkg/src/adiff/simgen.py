"""Synthetic moving-Gaussian samples with known ground-truth physics.

Random potential, skew and eigenvalue fields are drawn uniformly per cell and
smoothed; the resulting divergence-free velocity and PSD diffusion advance a
unit Gaussian blob with the package solver under no-flux boundaries.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .fields import (ConcentrationSeries, Grid, ScalarField, TensorField, VectorField, write_field,
                     write_series)
from .representation import (EigenDecomp, PhysicsParams, eig_sym, n_potential, n_skew,
                             write_params)
from .solver import BoundarySpec, integrate, stability

__all__ = ["SimConfig", "GroundTruth", "smooth", "sample_params", "gen_sample", "write_sample",
           "gradcheck_instance", "sample_rng"]


@dataclass(frozen=True)
class SimConfig:
    dims: tuple = (64, 64)
    spacing: float = 1.0
    n_frames: int = 40
    dt: float = 0.01
    sigma: float = 2.0
    psi_range: tuple = (-10.0, 10.0)
    lam_range: tuple = (0.0, 1.0)
    b_range: tuple = (-1.0, 1.0)
    seed: int = 0
    substeps: int = 10
    smoothing_passes: int = 3
    bc: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        for name in ("psi_range", "lam_range", "b_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must satisfy low <= high")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.lam_range[0] < 0:
            raise ValueError("lam_range must be non-negative")
        if self.n_frames < 2 or self.dt <= 0 or self.sigma <= 0 or self.substeps < 1:
            raise ValueError("need n_frames >= 2 and positive dt, sigma, substeps")
        grid = self.grid  # validates dims and spacing
        extent = [(n - 1) * h for n, h in zip(grid.dims, grid.spacing)]
        if any(e < 6.0 * self.sigma for e in extent):
            raise ValueError(f"domain {self.dims} too small for a blob 3 sigma from every face")

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, (self.spacing,) * len(self.dims))

    @property
    def dt_sub(self) -> float:
        return self.dt / self.substeps


@dataclass
class GroundTruth:
    params: PhysicsParams
    velocity: VectorField
    diffusion: TensorField
    eig: EigenDecomp
    center: tuple = ()
    rescale: float = 1.0


def sample_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([seed, index])


def smooth(a: np.ndarray, passes: int = 3) -> np.ndarray:
    """``passes`` rounds of a 3-point box filter along every spatial axis of ``(c, *dims)``."""
    out = np.asarray(a, dtype=np.float64)
    size = (1,) + (3,) * (out.ndim - 1)
    for _ in range(passes):
        out = uniform_filter(out, size=size, mode="nearest")
    return out


def sample_params(cfg: SimConfig, rng: Optional[np.random.Generator] = None) -> GroundTruth:
    """Draw smoothed random (psi, B, lam) and rescale psi, lam if the step would be unstable."""
    rng = sample_rng(cfg.seed) if rng is None else rng
    grid = cfg.grid
    d = grid.ndim

    def draw(rng_range, n):
        lo, hi = rng_range
        return smooth(rng.uniform(lo, hi, size=(n, *grid.dims)), cfg.smoothing_passes)

    psi = draw(cfg.psi_range, n_potential(d))
    b = draw(cfg.b_range, n_skew(d))
    lam = draw(cfg.lam_range, d)
    params = PhysicsParams.from_arrays(grid, psi, b, lam, bc=cfg.bc)
    report = stability(params.velocity(), params.diffusion(), grid, cfg.dt_sub)
    scale = 1.0
    if not report.ok:
        ratio = max(report.cfl_number / 1.0, report.fourier_number / 0.5)
        scale = 1.0 / (1.1 * ratio)
        params = PhysicsParams.from_arrays(grid, psi * scale, b, lam * scale, bc=cfg.bc)
    v, dd = params.velocity(), params.diffusion()
    return GroundTruth(params, v, dd, eig_sym(dd), rescale=scale)


def gen_sample(cfg: SimConfig, index: int = 0):
    """One sample: ``(series, ground_truth)`` with a blob at least 3 sigma from every face."""
    rng = sample_rng(cfg.seed, index)
    truth = sample_params(cfg, rng)
    grid = cfg.grid
    margin = 3.0 * cfg.sigma
    center = tuple(float(rng.uniform(margin, (n - 1) * h - margin))
                   for n, h in zip(grid.dims, grid.spacing))
    coords = grid.coordinates()
    r2 = sum((x - c) ** 2 for x, c in zip(coords, center))
    c0 = ScalarField(grid, np.exp(-r2 / (2.0 * cfg.sigma ** 2)))
    series = integrate(c0, truth.velocity, truth.diffusion, BoundarySpec.zero_neumann(),
                       t_span=(0.0, (cfg.n_frames - 1) * cfg.dt), dt_sub=cfg.dt_sub,
                       frame_dt=cfg.dt)
    truth.center = center
    return series, truth


def _config_json(cfg: SimConfig) -> dict:
    out = asdict(cfg)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def write_sample(directory, series: ConcentrationSeries, truth: GroundTruth,
                 cfg: Optional[SimConfig] = None) -> None:
    """Layout: ``series/`` frames, ``truth/params/``, ``truth/*.adgf`` fields, ``sample.json``."""
    directory = Path(directory)
    write_series(series, directory / "series")
    tdir = directory / "truth"
    write_params(truth.params, tdir / "params")
    write_field(truth.velocity, tdir / "velocity.adgf")
    write_field(truth.diffusion, tdir / "diffusion.adgf")
    grid = truth.velocity.grid
    write_field(VectorField(grid, truth.eig.eigvals), tdir / "eigvals.adgf")
    for i, u in enumerate(truth.eig.eigvec_fields()):
        write_field(u, tdir / f"eigvec_{i}.adgf")
    meta = {"center": list(truth.center), "rescale": truth.rescale}
    if cfg is not None:
        meta["config"] = _config_json(cfg)
    (directory / "sample.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def gradcheck_instance(seed: int = 0, dims=(8, 8), n_frames: int = 3, frame_dt: float = 0.2):
    """Small seeded problem for finite-difference checks: ``(guess, truth, observed)``.

    Both parameter sets are smooth random draws with clearly positive,
    anisotropic eigenvalues, so every coordinate has a well-conditioned
    influence on the losses. ``observed`` is simulated from ``truth`` from a
    Gaussian on a gentle ramp.
    """
    grid = Grid(tuple(dims))
    rng = np.random.default_rng(seed)
    d = grid.ndim

    def draw():
        psi = 5.0 * smooth(rng.uniform(-1, 1, (n_potential(d), *grid.dims)))
        b = 2.0 * smooth(rng.uniform(-1, 1, (n_skew(d), *grid.dims)))
        lam = np.concatenate([rng.uniform(0.5, 1.0, (1, *grid.dims)),
                              rng.uniform(0.02, 0.1, (d - 1, *grid.dims))])
        return PhysicsParams.from_arrays(grid, psi, b, lam)

    truth = draw()
    guess = draw()
    coords = grid.coordinates()
    center = [(n - 1) * h / 2 for n, h in zip(grid.dims, grid.spacing)]
    r2 = sum((x - c) ** 2 for x, c in zip(coords, center))
    c0 = ScalarField(grid, np.exp(-r2 / 8.0) + 0.2 * coords[0] / coords[0].max())
    v, dd = truth.velocity(), truth.diffusion()
    observed = integrate(c0, v, dd, t_span=(0.0, (n_frames - 1) * frame_dt), frame_dt=frame_dt)
    return guess, GroundTruth(truth, v, dd, eig_sym(dd)), observed
