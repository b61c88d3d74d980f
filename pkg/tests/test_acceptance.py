"""Acceptance checks, one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary. ``python tests/test_acceptance.py`` runs them without pytest.
"""
import filecmp
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from acceptance_report import report
from adiff.estimator import LatentLossConfig, OptimConfig, estimate, fit_representation
from adiff.fields import Grid, ScalarField, TensorField, VectorField
from adiff.metrics import RegionMask, angle_dev, fa_map, rae, rel_mean
from adiff.objective import GradcheckConfig, gradcheck
from adiff.representation import (EigenDecomp, PotentialField, TensorParams, build_tensor,
                                  cayley, curl, discrete_divergence, eig_sym, n_potential,
                                  n_skew)
from adiff.simgen import SimConfig, gen_sample, gradcheck_instance, sample_params, sample_rng
from adiff.solver import BoundarySpec, StabilityError, included_mask, integrate, stability


def test_divergence_free_by_construction():
    t0 = time.perf_counter()
    worst = 0.0
    for dims in ((16, 16), (8, 8, 8)):
        grid = Grid(dims)
        for seed in range(100):
            rng = np.random.default_rng([1, seed, len(dims)])
            psi = PotentialField(grid, rng.uniform(-10, 10, (n_potential(grid.ndim), *dims)))
            v = curl(psi)
            div = np.abs(discrete_divergence(v).data).max()
            worst = max(worst, div / np.abs(v.components).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5.0
    report(1, "divergence-free curl", ok,
           f"max |div|/max|V| = {worst:.2e} (<= 1e-10) over 200 fields, {elapsed:.2f}s (< 5s)")
    assert ok


def test_psd_by_construction():
    t0 = time.perf_counter()
    min_eig, orth = math.inf, 0.0
    for seed in range(100):
        rng = np.random.default_rng([2, seed])
        grid = Grid((8, 8) if seed % 2 else (6, 6, 6))
        d = grid.ndim
        b = rng.uniform(-5, 5, (n_skew(d), *grid.dims))
        lam_raw = rng.uniform(-1, 2, (d, *grid.dims))
        tensor = build_tensor(TensorParams(grid, b, lam_raw))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(tensor.matrix()).min()))
        u = cayley(b)
        gram = np.swapaxes(u, -1, -2) @ u - np.eye(d)
        orth = max(orth, float(np.sqrt(np.sum(gram ** 2, axis=(-2, -1))).max()))
    elapsed = time.perf_counter() - t0
    ok = min_eig >= -1e-12 and orth <= 1e-12 and elapsed < 5.0
    report(2, "PSD tensors", ok,
           f"min eigenvalue {min_eig:.2e} (>= -1e-12), max ||U^T U - I||_F {orth:.2e} "
           f"(<= 1e-12), {elapsed:.2f}s (< 5s)")
    assert ok


def _moments(c: np.ndarray, coords):
    mass = c.sum()
    mean = [float((c * x).sum() / mass) for x in coords]
    var = [float((c * (x - m) ** 2).sum() / mass) for x, m in zip(coords, mean)]
    return np.array(mean), np.array(var)


def test_stencil_and_integrator_oracles():
    t0 = time.perf_counter()
    grid = Grid((64, 64))
    coords = grid.coordinates()
    n_frames, dt = 40, 0.01
    t_end = (n_frames - 1) * dt
    r2 = (coords[0] - 31.5) ** 2 + (coords[1] - 31.5) ** 2
    c0 = ScalarField(grid, np.exp(-r2 / (2 * 3.0 ** 2)))

    vel = np.array([1.0, 0.5])
    v = VectorField(grid, vel[:, None, None] * np.ones((2, 64, 64)))
    adv = integrate(c0, v, None, BoundarySpec.zero_neumann(), (0.0, t_end), frame_dt=dt)
    m0, _ = _moments(adv.frames[0].data, coords)
    m1, _ = _moments(adv.frames[-1].data, coords)
    drift_err = np.linalg.norm((m1 - m0) - vel * t_end) / np.linalg.norm(vel * t_end)

    dcoef = 0.5
    d = TensorField(grid, np.stack([np.full((64, 64), dcoef), np.zeros((64, 64)),
                                    np.full((64, 64), dcoef)]))
    dif = integrate(c0, None, d, BoundarySpec.zero_neumann(), (0.0, t_end), frame_dt=dt)
    _, s0 = _moments(dif.frames[0].data, coords)
    _, s1 = _moments(dif.frames[-1].data, coords)
    var_err = np.max(np.abs((s1 - s0) - 2 * dcoef * t_end)) / (2 * dcoef * t_end)
    elapsed = time.perf_counter() - t0
    ok = drift_err <= 0.05 and var_err <= 0.02 and elapsed < 30.0
    report(3, "stencil/integrator oracles", ok,
           f"centroid drift rel err {drift_err:.2e} (<= 5%), variance growth rel err "
           f"{var_err:.2e} (<= 2%), {elapsed:.2f}s (< 30s)")
    assert ok


def test_stability_refusal():
    t0 = time.perf_counter()
    g3 = Grid((4, 4, 4))
    v = VectorField(g3, np.ones((3, 4, 4, 4)))
    cfl = stability(v, None, g3, 0.5)
    cfl_half = stability(v, None, g3, 0.25)
    diag = np.zeros((6, 4, 4, 4))
    diag[[0, 2, 5]] = 0.2
    d = TensorField(g3, diag)
    four = stability(None, d, g3, 1.0)
    four_half = stability(None, d, g3, 0.5)
    c0 = ScalarField(g3, np.ones((4, 4, 4)))
    refused = 0
    for vv, dd, step in ((v, None, 0.5), (None, d, 1.0)):
        try:
            integrate(c0, vv, dd, t_span=(0.0, step), dt_sub=step, frame_dt=step)
        except StabilityError:
            refused += 1
    integrate(c0, v, None, t_span=(0.0, 0.5), dt_sub=0.25, frame_dt=0.5)
    integrate(c0, None, d, t_span=(0.0, 1.0), dt_sub=0.5, frame_dt=1.0)
    elapsed = time.perf_counter() - t0
    ok = (math.isclose(cfl.cfl_number, 1.5) and not cfl.ok and cfl_half.ok
          and math.isclose(four.fourier_number, 0.6) and not four.ok and four_half.ok
          and refused == 2 and elapsed < 1.0)
    report(4, "stability refusal", ok,
           f"c={cfl.cfl_number:.3g} ok={cfl.ok}, halved ok={cfl_half.ok}; "
           f"F={four.fourier_number:.3g} ok={four.ok}, halved ok={four_half.ok}; "
           f"integrator refused {refused}/2, {elapsed:.2f}s (< 1s)")
    assert ok


def test_gradient_correctness():
    t0 = time.perf_counter()
    guess, truth, observed = gradcheck_instance(seed=0, dims=(8, 8), n_frames=3)
    lat = gradcheck(guess, GradcheckConfig(kind="latent", n_coords=256, h=1e-5), observed,
                    n_out=3)
    drc = gradcheck(guess, GradcheckConfig(kind="direct", n_coords=256, h=1e-5),
                    truth.velocity, truth.diffusion)
    elapsed = time.perf_counter() - t0
    ok = (lat["max_rel_err"] <= 1e-5 and drc["max_rel_err"] <= 1e-5
          and lat["n_checked"] >= 200 and drc["n_checked"] >= 200 and elapsed < 60.0)
    report(5, "gradient correctness", ok,
           f"latent max rel err {lat['max_rel_err']:.2e} over {lat['n_checked']} coords, "
           f"direct {drc['max_rel_err']:.2e} over {drc['n_checked']} (<= 1e-5), "
           f"{elapsed:.1f}s (< 60s)")
    assert ok


def test_inverse_self_consistency():
    t0 = time.perf_counter()
    cfg = SimConfig(dims=(16, 16), n_frames=12, seed=0)
    series, _ = gen_sample(cfg, 0)
    optim = OptimConfig(lr=0.02, decay_every=1000, max_iters=2000, tol=0.0)
    params, history = estimate(series, "zero", optim, LatentLossConfig(n_out=10, w_ss=0.0))

    def resim_rae(p, region):
        pred = integrate(series.frames[0], p.velocity(), p.diffusion(),
                         BoundarySpec.zero_neumann(),
                         (series.t0, series.t0 + (series.n_frames - 1) * series.dt),
                         frame_dt=series.dt)
        later = lambda s: type(s)(s.frames[1:], s.dt, s.t0 + s.dt)
        return rae(later(series), later(pred), region)

    inc = included_mask(series.grid)
    err = resim_rae(params, inc)
    err_all = resim_rae(params, None)
    zero = type(params).zeros(series.grid)
    baseline = resim_rae(zero, inc)
    best = [row["best"] for row in history]
    monotone = all(b1 <= b0 for b0, b1 in zip(best, best[1:]))
    elapsed = time.perf_counter() - t0
    ok = err <= 0.05 and monotone and elapsed < 600.0
    report(6, "inverse self-consistency", ok,
           f"re-simulated C RAE {err:.2%} on included cells (<= 5%; zero-physics baseline "
           f"{baseline:.2%}; all cells {err_all:.2%}), best-so-far non-increasing={monotone}, "
           f"{len(history) - 1} iters, {elapsed:.0f}s (< 600s)")
    assert ok


def test_representation_fitting():
    t0 = time.perf_counter()
    cfg = SimConfig(dims=(16, 16), n_frames=12, seed=0)
    truth = sample_params(cfg, sample_rng(cfg.seed, 0))
    fit = fit_representation(truth.velocity, truth.diffusion)
    rv = rae(truth.velocity, fit.params.velocity())
    rd = rae(truth.diffusion, fit.params.diffusion())
    elapsed = time.perf_counter() - t0
    ok = rv <= 1e-2 and rd <= 1e-2 and elapsed < 300.0
    report(7, "representation fitting", ok,
           f"RAE(V) {rv:.2e}, RAE(D) {rd:.2e} (<= 1e-2), {elapsed:.1f}s (< 300s)")
    assert ok


def _eig_of(grid, lams):
    lams = np.asarray(lams, dtype=float)
    vals = np.broadcast_to(lams.reshape(-1, *([1] * grid.ndim)), (grid.ndim, *grid.dims))
    vecs = np.broadcast_to(np.eye(grid.ndim).reshape(grid.ndim, grid.ndim, *([1] * grid.ndim)),
                           (grid.ndim, grid.ndim, *grid.dims))
    return EigenDecomp(grid, np.array(vals), np.array(vecs))


def test_metric_fixed_points():
    g3 = Grid((3, 3, 3))
    fa_iso = fa_map(_eig_of(g3, [0.7, 0.7, 0.7])).data
    fa_line = fa_map(_eig_of(g3, [1.0, 0.0, 0.0])).data
    fa_211 = fa_map(_eig_of(g3, [2.0, 1.0, 1.0])).data
    fa_from_tensor = fa_map(TensorField.from_matrix(
        g3, np.broadcast_to(np.diag([2.0, 1.0, 1.0]), (3, 3, 3, 3, 3)))).data

    g2 = Grid((4, 4))
    left = np.zeros((4, 4), dtype=bool)
    left[:, :2] = True
    m = ScalarField(g2, np.full((4, 4), 3.0))
    rm = rel_mean(m, RegionMask(g2, left), RegionMask(g2, ~left))

    u = np.zeros((2, 4, 4))
    u[0, :, :2] = 1.0
    u[0, :, 2:] = -1.0
    mirror = [g2.flat_index(i, 3 - j) for i in range(4) for j in range(2)]
    ang = angle_dev(VectorField(g2, u), RegionMask(g2, left), mirror)

    checks = {
        "FA(iso)=0": np.all(fa_iso == 0.0),
        "FA(1,0,0)=1": np.all(fa_line == 1.0),
        "FA(2,1,1)=sqrt(1/6)": np.all(np.abs(fa_211 - math.sqrt(1 / 6)) <= 1e-12)
        and np.all(np.abs(fa_from_tensor - math.sqrt(1 / 6)) <= 1e-12),
        "rel_mean(equal)=1": rm == 1.0,
        "angle_dev(opposite)=0": ang == 0.0,
    }
    ok = all(bool(v) for v in checks.values())
    report(8, "metric fixed points", ok,
           ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def _adiff(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "adiff.cli", *args], cwd=cwd,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def _same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return False
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in fa], shallow=False)
    return not mismatch and not errors


def test_determinism(tmp_path):
    t0 = time.perf_counter()
    sim = ["simulate", "--seed", "7", "--dims", "16", "16", "--n-frames", "12", "--count", "4"]
    est = ["estimate", "--seed", "7", "--max-iters", "15", "--set", "loss.n_out=4"]
    jobs = {"simulate": [], "estimate": [], "patches": [], "evaluate": [], "gradcheck": [],
            "project-divfree": [], "fit-repr": []}
    for run, n in (("a", "1"), ("b", "1"), ("c", "4")):
        _adiff([*sim, "--jobs", n, "--out", f"sim_{run}"], tmp_path)
        jobs["simulate"].append(f"sim_{run}")
        sample = f"sim_{run}/sample_0001"
        _adiff([*est, sample, "--jobs", n, "--out", f"est_{run}"], tmp_path)
        jobs["estimate"].append(f"est_{run}")
        _adiff([*est, sample, "--patch-size", "8", "--jobs", n, "--out", f"pat_{run}"], tmp_path)
        jobs["patches"].append(f"pat_{run}")
        _adiff(["evaluate", sample, f"est_{run}", "--jobs", n, "--out", f"ev_{run}"], tmp_path)
        jobs["evaluate"].append(f"ev_{run}")
        _adiff(["gradcheck", "--set", "gradcheck.n_coords=32", "--jobs", n,
                "--out", f"gc_{run}"], tmp_path)
        jobs["gradcheck"].append(f"gc_{run}")
        truth = f"{sample}/truth"
        _adiff(["project-divfree", f"{truth}/velocity.adgf", "--jobs", n,
                "--out", f"pd_{run}"], tmp_path)
        jobs["project-divfree"].append(f"pd_{run}")
        _adiff(["fit-repr", f"{truth}/velocity.adgf", f"{truth}/diffusion.adgf",
                "--max-iters", "50", "--jobs", n, "--out", f"fr_{run}"], tmp_path)
        jobs["fit-repr"].append(f"fr_{run}")
    same = {k: _same_tree(tmp_path / a, tmp_path / b) and _same_tree(tmp_path / a, tmp_path / c)
            for k, (a, b, c) in jobs.items()}
    elapsed = time.perf_counter() - t0
    ok = all(same.values())
    report(9, "determinism", ok,
           "bitwise identical across two runs and --jobs 1 vs 4 for "
           + ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items())
           + f", {elapsed:.0f}s")
    assert ok


if __name__ == "__main__":
    import tempfile

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    failed = 0
    for fn in tests:
        try:
            if fn is test_determinism:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
