"""scikit-learn style estimators over the package's field containers."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .estimator import (LatentLossConfig, OptimConfig, estimate, estimate_patches,
                        fit_representation, project_divfree)
from .fields import ConcentrationSeries, Grid, TensorField, VectorField
from .metrics import rae
from .solver import BoundarySpec, integrate, predict_window

__all__ = [
    "check_series",
    "check_vector_field",
    "check_tensor_field",
    "LatentPhysicsEstimator",
    "RepresentationFitter",
    "DivergenceFreeProjector",
]


def _grid_for(shape, spacing) -> Grid:
    return Grid(tuple(int(n) for n in shape), spacing)


def check_series(X, dt: Optional[float] = None, spacing=None) -> ConcentrationSeries:
    """Accept a ``ConcentrationSeries`` or a ``(frames, *dims)`` array plus ``dt``."""
    if isinstance(X, ConcentrationSeries):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected frames x 2D/3D grid, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("series contains non-finite values")
    if dt is None:
        raise ValueError("dt is required when passing a raw array")
    return ConcentrationSeries.from_array(_grid_for(arr.shape[1:], spacing), arr, dt)


def check_vector_field(X, spacing=None) -> VectorField:
    """Accept a ``VectorField`` or a ``(ndim, *dims)`` array."""
    if isinstance(X, VectorField):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim not in (3, 4) or arr.shape[0] != arr.ndim - 1:
        raise ValueError(f"expected (ndim, *dims) components, got shape {arr.shape}")
    return VectorField(_grid_for(arr.shape[1:], spacing), arr)


def check_tensor_field(X, spacing=None) -> TensorField:
    """Accept a ``TensorField`` or a ``(ndim(ndim+1)/2, *dims)`` array of stored entries."""
    if isinstance(X, TensorField):
        return X
    arr = np.asarray(X, dtype=np.float64)
    ndim = arr.ndim - 1
    if ndim not in (2, 3) or arr.shape[0] != ndim * (ndim + 1) // 2:
        raise ValueError(f"expected (n_entries, *dims) tensor entries, got shape {arr.shape}")
    return TensorField(_grid_for(arr.shape[1:], spacing), arr)


class LatentPhysicsEstimator(BaseEstimator):
    """Estimate divergence-free velocity and PSD diffusion from a concentration series.

    ``fit`` optimizes potential, skew and eigenvalue fields so that simulated
    windows reproduce the observed frames; ``predict`` re-simulates a series
    from its first frame with the fitted physics.

    Parameters
    ----------
    n_out : int
        Number of frames in each predicted window (including the first).
    w_grad, w_ss : float
        Weights of the concentration-gradient misfit and of the smoothness term.
    lr, decay_factor, decay_every, max_iters, tol, window : optimizer settings.
    init : {"zero", "noise"}
    noise : float
        Standard deviation of the Gaussian initialization when ``init="noise"``.
    patch_size : int or None
        When set, estimate on an exact tiling with this patch edge and splice.
    n_jobs : int
        Worker processes for patch mode.
    random_state : int
    """

    def __init__(self, n_out=10, w_grad=0.5, w_ss=0.1, lr=1e-3, decay_factor=0.1,
                 decay_every=500, max_iters=1000, tol=1e-9, window=50, init="zero",
                 noise=1e-2, patch_size=None, n_jobs=1, bc="normal", random_state=0):
        self.n_out = n_out
        self.w_grad = w_grad
        self.w_ss = w_ss
        self.lr = lr
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.max_iters = max_iters
        self.tol = tol
        self.window = window
        self.init = init
        self.noise = noise
        self.patch_size = patch_size
        self.n_jobs = n_jobs
        self.bc = bc
        self.random_state = random_state

    def _configs(self):
        optim = OptimConfig(lr=self.lr, decay_factor=self.decay_factor,
                            decay_every=self.decay_every, max_iters=self.max_iters,
                            seed=self.random_state, tol=self.tol, window=self.window)
        loss = LatentLossConfig(n_out=self.n_out, w_grad=self.w_grad, w_ss=self.w_ss)
        return optim, loss

    def fit(self, X, y=None, dt=None):
        series = check_series(X, dt)
        optim, loss = self._configs()
        if self.patch_size is None:
            self.params_, self.history_ = estimate(series, self.init, optim, loss, bc=self.bc,
                                                   noise=self.noise)
            self.velocity_ = self.params_.velocity()
            self.diffusion_ = self.params_.diffusion()
        else:
            self.velocity_, self.diffusion_, self.patches_ = estimate_patches(
                series, self.patch_size, optim, loss, bc=self.bc, jobs=self.n_jobs)
        self.grid_ = series.grid
        return self

    def predict(self, X, dt=None) -> ConcentrationSeries:
        """No-flux re-simulation of ``X`` from its first frame."""
        check_is_fitted(self, "velocity_")
        series = check_series(X, dt)
        if series.grid != self.grid_:
            raise ValueError("series grid differs from the fitted grid")
        return integrate(series.frames[0], self.velocity_, self.diffusion_,
                         BoundarySpec.zero_neumann(),
                         t_span=(series.t0, series.t0 + (series.n_frames - 1) * series.dt),
                         frame_dt=series.dt)

    def predict_window(self, X, dt=None) -> ConcentrationSeries:
        """Re-simulation with observed boundary values, as seen by the loss."""
        check_is_fitted(self, "params_")
        series = check_series(X, dt)
        return predict_window(self.params_, series, series.n_frames)

    def score(self, X, y=None, dt=None) -> float:
        """Negative concentration RAE of ``predict`` over frames after the first."""
        series = check_series(X, dt)
        pred = self.predict(series)
        later = lambda s: ConcentrationSeries(s.frames[1:], s.dt, s.t0 + s.dt)
        return -rae(later(series), later(pred))


class RepresentationFitter(BaseEstimator):
    """Fit potential, skew and eigenvalue fields to known velocity and diffusion fields.

    ``fit(V, D)`` takes field containers or raw arrays; ``transform`` returns
    the represented ``(V_hat, D_hat)``.
    """

    def __init__(self, lr=0.05, decay_factor=0.1, decay_every=1000, max_iters=3000, tol=0.0,
                 window=50, w_ula=0.5, target_loss=1e-8, bc="normal"):
        self.lr = lr
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.max_iters = max_iters
        self.tol = tol
        self.window = window
        self.w_ula = w_ula
        self.target_loss = target_loss
        self.bc = bc

    def fit(self, X, y):
        v = check_vector_field(X)
        d = check_tensor_field(y)
        if v.grid != d.grid:
            raise ValueError("velocity and diffusion targets live on different grids")
        cfg = OptimConfig(lr=self.lr, decay_factor=self.decay_factor, decay_every=self.decay_every,
                          max_iters=self.max_iters, tol=self.tol, window=self.window)
        result = fit_representation(v, d, cfg, w_ula=self.w_ula, bc=self.bc,
                                    target_loss=self.target_loss)
        self.params_ = result.params
        self.loss_ = result.loss
        self.l_vd_ = result.l_vd
        self.converged_ = result.converged
        self.history_ = result.history
        return self

    def transform(self, X=None):
        check_is_fitted(self, "params_")
        return self.params_.velocity(), self.params_.diffusion()


class DivergenceFreeProjector(TransformerMixin, BaseEstimator):
    """Least-squares projection of velocity fields onto discrete curl fields."""

    def __init__(self, bc="normal"):
        self.bc = bc

    def fit(self, X, y=None):
        v = check_vector_field(X)
        self.grid_ = v.grid
        return self

    def transform(self, X) -> VectorField:
        check_is_fitted(self, "grid_")
        v = check_vector_field(X, self.grid_.spacing)
        out, psi = project_divfree(v, bc=self.bc)
        self.potential_ = psi
        return out
