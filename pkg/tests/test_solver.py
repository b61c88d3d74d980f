import math

import numpy as np
import pytest

from adiff.fields import ConcentrationSeries, Grid, ScalarField, TensorField, VectorField
from adiff.representation import PhysicsParams
from adiff.simgen import SimConfig, gen_sample
from adiff.solver import (BoundarySpec, StabilityError, adv_diff_rhs, advection_rhs, apply_bc,
                          choose_dt_sub, diffusion_rhs, ghost_values, integrate, predict_window,
                          stability)

G = Grid((5, 6))


def const(value, n=None, grid=G):
    shape = grid.dims if n is None else (n, *grid.dims)
    return np.full(shape, float(value))


def test_upwind_row_example():
    g = Grid((3, 3))
    c = ScalarField(g, np.tile([0.0, 1.0, 2.0], (3, 1)).T)
    v = VectorField(g, np.stack([const(1, grid=g), const(0, grid=g)]))
    assert advection_rhs(c, v).data[1, 1] == -1.0
    v = VectorField(g, np.stack([const(-1, grid=g), const(0, grid=g)]))
    assert advection_rhs(c, v).data[1, 1] == 1.0  # forward difference for negative speed


def test_zero_rhs_cases():
    rng = np.random.default_rng(0)
    c = ScalarField(G, rng.random(G.dims))
    zero_v = VectorField(G, const(0, 2))
    zero_d = TensorField(G, const(0, 3))
    assert np.all(advection_rhs(c, zero_v).data == 0.0)
    assert np.all(diffusion_rhs(c, zero_d).data == 0.0)
    assert np.all(adv_diff_rhs(c, zero_v, zero_d).data == 0.0)
    flat = ScalarField(G, const(4.0))
    v = VectorField(G, rng.normal(size=(2, *G.dims)))
    d = TensorField(G, rng.random((3, *G.dims)))
    assert np.all(advection_rhs(flat, v).data == 0.0)
    assert np.allclose(diffusion_rhs(flat, d).data, 0.0, atol=1e-15)


def test_diffusion_of_quadratic():
    x, y = G.coordinates()
    c = ScalarField(G, x ** 2)
    d = TensorField(G, np.stack([const(1), const(0), const(1)]))
    np.testing.assert_allclose(diffusion_rhs(c, d).data[1:-1, 1:-1], 2.0)
    # anisotropic constant tensor on xy: only the cross term survives
    c = ScalarField(G, x * y)
    d = TensorField(G, np.stack([const(0), const(0.5), const(0)]))
    np.testing.assert_allclose(diffusion_rhs(c, d).data[1:-1, 1:-1], 1.0)


def test_stability_examples():
    g = Grid((3, 3, 3))
    r = stability(VectorField(g, const(1, 3, g)), None, g, 0.5)
    assert r.cfl_number == pytest.approx(1.5) and not r.ok
    diag = np.zeros((6, 3, 3, 3))
    diag[[0, 2, 5]] = 0.2
    r = stability(None, TensorField(g, diag), g, 1.0)
    assert r.fourier_number == pytest.approx(0.6) and not r.ok
    r = stability(VectorField(g, const(0, 3, g)), TensorField(g, np.zeros((6, 3, 3, 3))), g, 1e6)
    assert r.ok and r.cfl_number == 0.0 and r.fourier_number == 0.0
    assert math.isinf(r.max_stable_dt)


def test_choose_dt_sub():
    assert choose_dt_sub(0.01, 0.004) == pytest.approx(0.01 / 3)
    assert choose_dt_sub(0.01, 0.01) == 0.01
    assert choose_dt_sub(0.01, math.inf) == 0.01
    with pytest.raises(StabilityError):
        choose_dt_sub(1.0, 1e-9)


def test_cauchy_overwrites_boundary():
    c = ScalarField(G, const(1.0))
    out = apply_bc(c, BoundarySpec.cauchy([const(7.0)]), const(7.0))
    assert np.all(out.data[G.boundary_mask()] == 7.0)
    assert np.all(out.data[1:-1, 1:-1] == 1.0)
    assert apply_bc(c, BoundarySpec.zero_neumann()) is c
    ghosts = ghost_values(ScalarField(G, np.arange(30.0).reshape(5, 6)), BoundarySpec.zero_neumann())
    np.testing.assert_array_equal(ghosts[0, 1:-1], ghosts[1, 1:-1])


def test_zero_physics_keeps_frames():
    c0 = ScalarField(G, np.random.default_rng(1).random(G.dims))
    s = integrate(c0, None, None, t_span=(0.0, 0.3), frame_dt=0.1)
    assert s.n_frames == 4
    assert all(f == c0 for f in s.frames)


def test_refuses_unstable_step():
    v = VectorField(G, const(2.0, 2))
    c0 = ScalarField(G, const(1.0))
    with pytest.raises(StabilityError):
        integrate(c0, v, None, t_span=(0.0, 1.0), dt_sub=1.0, frame_dt=1.0)
    s = integrate(c0, v, None, t_span=(0.0, 1.0), frame_dt=1.0)
    assert s.diagnostics["stability"].ok
    assert s.diagnostics["dt_sub"] <= 0.25


def test_mass_under_no_flux():
    # constant diagonal tensor: the 3-point Laplacian telescopes with mirrored
    # ghosts, so mass is conserved to roundoff; the cross term only nearly so
    g = Grid((12, 12))
    x, y = g.coordinates()
    c0 = ScalarField(g, np.exp(-((x - 4.5) ** 2 + (y - 6.5) ** 2) / 4))
    mass = c0.data.sum()
    for xy, rel in ((0.0, 1e-12), (0.2, 1e-5)):
        d = TensorField(g, np.stack([const(0.6, grid=g), const(xy, grid=g), const(0.3, grid=g)]))
        s = integrate(c0, None, d, t_span=(0.0, 1.0), frame_dt=0.5)
        assert s.frames[-1].data.sum() == pytest.approx(mass, rel=rel)
        assert max(s.diagnostics["embedded_error"]) < 1e-3


def test_predict_window_with_truth():
    cfg = SimConfig(dims=(16, 16), n_frames=12, seed=3)
    series, truth = gen_sample(cfg, 0)
    pred = predict_window(truth.params, series, 10)
    inc = pred.diagnostics["included"]
    obs = series.to_array()[1:10][:, inc]
    err = np.abs(pred.to_array()[1:][:, inc] - obs) / np.abs(obs)
    assert err.mean() <= 0.02
    with pytest.raises(ValueError):
        predict_window(truth.params, series, 13)


def test_predict_window_zero_physics():
    g = Grid((4, 4))
    series = ConcentrationSeries.from_array(g, np.random.default_rng(4).random((3, 4, 4)), 0.1)
    pred = predict_window(PhysicsParams.zeros(g), series, 3)
    inner = ~g.boundary_mask()
    for k in range(3):
        np.testing.assert_array_equal(pred.frames[k].data[inner], series.frames[0].data[inner])
        np.testing.assert_array_equal(pred.frames[k].data[~inner], series.frames[k].data[~inner])
