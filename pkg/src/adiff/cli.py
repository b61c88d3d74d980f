"""Command-line entry point: ``adiff <command> [options]``.

Every command takes an optional strict JSON config (``--config``), accepts
``--set section.key=value`` overrides, prints the resolved config, and writes
all outputs under ``--out``. Failures print a JSON error object on stderr and
exit non-zero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .estimator import (LatentLossConfig, OptimConfig, estimate, estimate_patches,
                        fit_representation, project_divfree, write_history)
from .fields import (ConcentrationSeries, FieldFormatError, ScalarField, TensorField, VectorField,
                     read_field, read_series, write_field, write_series)
from .metrics import eigvec_rae, rae, write_rows_csv, write_rows_json
from .objective import GradcheckConfig, gradcheck
from .representation import discrete_divergence, eig_sym, write_params
from .simgen import SimConfig, gen_sample, gradcheck_instance, write_sample
from .solver import BoundarySpec, integrate

SECTIONS = {
    "sim": SimConfig,
    "optim": OptimConfig,
    "loss": LatentLossConfig,
    "gradcheck": GradcheckConfig,
}

# top-level keys each command accepts, with their defaults
COMMAND_KEYS = {
    "simulate": {"seed": None, "count": 1, "sim": {}},
    "estimate": {"seed": None, "optim": {}, "loss": {}, "init": "zero", "noise": 1e-2,
                 "patch_size": None, "bc": "normal"},
    "evaluate": {},
    "gradcheck": {"seed": 0, "gradcheck": {}, "dims": [8, 8], "n_frames": 3, "frame_dt": 0.2},
    "project-divfree": {"bc": "normal"},
    "fit-repr": {"optim": {"lr": 0.05, "max_iters": 3000, "decay_every": 1000, "tol": 0.0},
                 "w_ula": 0.5, "bc": "normal", "target_loss": 1e-8},
}


class JobError(Exception):
    """Failure reported to the user as a JSON error object."""

    kind = "job"
    code = 1


class UsageError(JobError):
    kind = "usage"
    code = 2


# -- configuration -------------------------------------------------------------

def _section_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def resolve_config(command: str, user: dict, overrides: dict) -> dict:
    """Fill defaults, reject unknown keys, apply overrides (``a.b`` paths)."""
    allowed = COMMAND_KEYS[command]
    cfg = {}
    for key, default in allowed.items():
        if key in SECTIONS:
            cfg[key] = {**_section_defaults(SECTIONS[key]), **default}
        else:
            cfg[key] = default

    def merge(src: dict, where: str):
        for key, val in src.items():
            path = key.split(".")
            if path[0] not in cfg:
                raise UsageError(f"unknown config key {where}{path[0]!r}")
            if len(path) == 1 and path[0] in SECTIONS:
                if not isinstance(val, dict):
                    raise UsageError(f"config section {path[0]!r} must be an object")
                for sub, sv in val.items():
                    if sub not in cfg[path[0]]:
                        raise UsageError(f"unknown config key {path[0]}.{sub}")
                    cfg[path[0]][sub] = sv
            elif len(path) == 2 and path[0] in SECTIONS:
                if path[1] not in cfg[path[0]]:
                    raise UsageError(f"unknown config key {key}")
                cfg[path[0]][path[1]] = val
            elif len(path) == 1:
                cfg[path[0]] = val
            else:
                raise UsageError(f"unknown config key {key}")

    merge(user, "")
    merge(overrides, "")
    return cfg


def _build(cls, section: dict):
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in section.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_user_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return data


def worker_count(requested: int) -> int:
    """``--jobs`` capped by the ``ADIFF_THREADS`` environment variable."""
    n = max(1, int(requested))
    cap = os.environ.get("ADIFF_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"ADIFF_THREADS must be an integer, got {cap!r}") from None
    return n


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------

def _simulate_one(args):
    sim, index, directory = args
    series, truth = gen_sample(sim, index)
    write_sample(directory, series, truth, sim)
    return str(directory)


def cmd_simulate(cfg: dict, out: Path, jobs: int) -> dict:
    sim = _build(SimConfig, {**cfg["sim"], "seed": cfg["seed"]})
    count = int(cfg["count"])
    if count < 1:
        raise UsageError("count must be >= 1")
    dirs = [out] if count == 1 else [out / f"sample_{i:04d}" for i in range(count)]
    tasks = [(sim, i, d) for i, d in enumerate(dirs)]
    if jobs > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_simulate_one, tasks))
    else:
        for t in tasks:
            _simulate_one(t)
    return {"samples": [str(d) for d in dirs]}


def _resimulate(series: ConcentrationSeries, v: VectorField, d: TensorField) -> ConcentrationSeries:
    """No-flux re-simulation from the first observed frame over the whole span."""
    return integrate(series.frames[0], v, d, BoundarySpec.zero_neumann(),
                     t_span=(series.t0, series.t0 + (series.n_frames - 1) * series.dt),
                     frame_dt=series.dt)


def _series_dir(path: Path) -> Path:
    return path / "series" if (path / "series" / "manifest.json").exists() else path


def cmd_estimate(cfg: dict, out: Path, jobs: int, series_path: Path) -> dict:
    try:
        observed = read_series(_series_dir(series_path))
    except (FileNotFoundError, FieldFormatError) as exc:
        raise JobError(f"cannot read series: {exc}") from None
    optim = _build(OptimConfig, {**cfg["optim"], "seed": cfg["seed"]})
    loss = _build(LatentLossConfig, cfg["loss"])
    if cfg["patch_size"] is None:
        params, history = estimate(observed, cfg["init"], optim, loss, bc=cfg["bc"],
                                   noise=float(cfg["noise"]))
        write_params(params, out / "params")
        write_history(history, out / "history.csv")
        v, d = params.velocity(), params.diffusion()
        best = history[-1]["best"]
    else:
        v, d, results = estimate_patches(observed, cfg["patch_size"], optim, loss, bc=cfg["bc"],
                                         jobs=jobs)
        for spec, params, history in results:
            tag = "_".join(str(o) for o in spec.origin)
            write_params(params, out / "patches" / tag / "params")
            write_history(history, out / "patches" / tag / "history.csv")
        best = max(h[-1]["best"] for _, _, h in results)
    write_field(v, out / "velocity.adgf")
    write_field(d, out / "diffusion.adgf")
    write_series(_resimulate(observed, v, d), out / "series")
    div = discrete_divergence(v).data
    vmax = float(np.abs(v.components).max())
    min_eig = float(eig_sym(d).eigvals.min())
    checks = {"divergence_free": bool(np.abs(div).max() <= 1e-10 * max(vmax, 1e-300)),
              "psd": bool(min_eig >= -1e-12)}
    report = {"best_loss": best, "max_abs_divergence": float(np.abs(div).max()),
              "min_eigenvalue": min_eig, "checks": checks}
    _dump(report, out / "report.json")
    if not all(checks.values()):
        raise JobError(f"invariant spot-check failed: {checks}")
    return report


def _find(path: Path, name: str) -> Path:
    for cand in (path / name, path / "truth" / name):
        if cand.exists():
            return cand
    raise JobError(f"{name} not found under {path}")


def _load_eval(path: Path):
    try:
        v = read_field(_find(path, "velocity.adgf"))
        d = read_field(_find(path, "diffusion.adgf"))
        series = read_series(_series_dir(path))
    except (FileNotFoundError, FieldFormatError) as exc:
        raise JobError(f"cannot read {path}: {exc}") from None
    return v, d, series


def cmd_evaluate(cfg: dict, out: Path, jobs: int, truth_path: Path, est_path: Path) -> dict:
    v_t, d_t, s_t = _load_eval(truth_path)
    v_e, d_e, s_e = _load_eval(est_path)
    if v_t.grid != v_e.grid or s_t.grid != s_e.grid:
        raise JobError("grid mismatch between truth and estimate")
    if s_t.n_frames != s_e.n_frames:
        raise JobError("series lengths differ between truth and estimate")
    eig_t, eig_e = eig_sym(d_t), eig_sym(d_e)
    lam_t = VectorField(v_t.grid, eig_t.eigvals)
    lam_e = VectorField(v_e.grid, eig_e.eigvals)
    later = lambda s: ConcentrationSeries(s.frames[1:], s.dt, s.t0 + s.dt)
    values = {
        "Err_V": rae(v_t, v_e),
        "Err_D": rae(d_t, d_e),
        "Err_U": eigvec_rae(eig_t, eig_e),
        "Err_Lambda": rae(lam_t, lam_e),
        "Err_C": rae(later(s_t), later(s_e)),
    }
    sample = truth_path.name
    rows = [{"sample": sample, "metric": k, "value": v} for k, v in values.items()]
    write_rows_csv(rows, out / "metrics.csv")
    write_rows_json(rows, out / "metrics.json")
    return values


def cmd_gradcheck(cfg: dict, out: Path, jobs: int) -> dict:
    gc = _build(GradcheckConfig, cfg["gradcheck"])
    params, truth, observed = gradcheck_instance(int(cfg["seed"]), tuple(cfg["dims"]),
                                                 int(cfg["n_frames"]), float(cfg["frame_dt"]))
    if gc.kind == "latent":
        report = gradcheck(params, gc, observed)
    elif gc.kind == "direct":
        report = gradcheck(params, gc, truth.velocity, truth.diffusion)
    else:
        raise UsageError(f"gradcheck kind must be 'latent' or 'direct', got {gc.kind!r}")
    _dump(report, out / "gradcheck.json")
    if not report["pass"]:
        raise JobError(f"gradient check failed: max_rel_err={report['max_rel_err']:.3g}")
    return report


def _read_kind(path: Path, cls):
    try:
        f = read_field(path)
    except (FileNotFoundError, FieldFormatError) as exc:
        raise JobError(f"cannot read {path}: {exc}") from None
    if not isinstance(f, cls):
        raise JobError(f"{path} holds a {type(f).__name__}, expected {cls.__name__}")
    return f


def cmd_project_divfree(cfg: dict, out: Path, jobs: int, velocity_path: Path) -> dict:
    v = _read_kind(velocity_path, VectorField)
    proj, psi = project_divfree(v, bc=cfg["bc"])
    write_field(proj, out / "velocity.adgf")
    for i, comp in enumerate(psi.data):
        write_field(ScalarField(v.grid, comp), out / f"psi_{i}.adgf")
    vmax = float(np.abs(proj.components).max())
    div = float(np.abs(discrete_divergence(proj).data).max())
    report = {"max_abs_divergence": div,
              "rae_vs_input": rae(v, proj) if np.any(v.norm() >= 1e-12) else 0.0,
              "divergence_free": bool(div <= 1e-10 * max(vmax, 1e-300))}
    _dump(report, out / "report.json")
    if not report["divergence_free"]:
        raise JobError("projected field failed the divergence spot-check")
    return report


def cmd_fit_repr(cfg: dict, out: Path, jobs: int, velocity_path: Path, diffusion_path: Path) -> dict:
    v = _read_kind(velocity_path, VectorField)
    d = _read_kind(diffusion_path, TensorField)
    if v.grid != d.grid:
        raise JobError("velocity and diffusion targets live on different grids")
    optim = _build(OptimConfig, cfg["optim"])
    fit = fit_representation(v, d, optim, w_ula=float(cfg["w_ula"]), bc=cfg["bc"],
                             target_loss=float(cfg["target_loss"]))
    write_params(fit.params, out / "params")
    v_hat, d_hat = fit.params.velocity(), fit.params.diffusion()
    write_field(v_hat, out / "velocity.adgf")
    write_field(d_hat, out / "diffusion.adgf")

    def safe_rae(a, b):
        try:
            return rae(a, b)
        except ValueError:
            return None

    report = {"loss": fit.loss, "l_vd": fit.l_vd, "converged": fit.converged,
              "iterations": len(fit.history) - 1, "rae_v": safe_rae(v, v_hat),
              "rae_d": safe_rae(d, d_hat)}
    _dump(report, out / "report.json")
    return report


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="JSON job configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. optim.lr=0.01 (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (capped by ADIFF_THREADS)")
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("simulate", help="generate moving-Gaussian samples with ground truth")
    common(sp, seed_required=True)
    sp.add_argument("--dims", type=int, nargs="+")
    sp.add_argument("--n-frames", type=int)
    sp.add_argument("--count", type=int)

    sp = sub.add_parser("estimate", help="estimate physics from an observed series")
    common(sp, seed_required=True)
    sp.add_argument("series", help="series directory (or a sample directory)")
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--patch-size", type=int)

    sp = sub.add_parser("evaluate", help="error metrics of an estimate against ground truth")
    common(sp)
    sp.add_argument("truth")
    sp.add_argument("estimate")

    sp = sub.add_parser("gradcheck", help="compare taped gradients with finite differences")
    common(sp)

    sp = sub.add_parser("project-divfree", help="project a velocity field onto curl fields")
    common(sp)
    sp.add_argument("velocity")

    sp = sub.add_parser("fit-repr", help="fit the parameterization to known V and D")
    common(sp)
    sp.add_argument("velocity")
    sp.add_argument("diffusion")
    sp.add_argument("--max-iters", type=int)
    return p


def _flag_overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "dims", None):
        out["sim.dims"] = args.dims
    if getattr(args, "n_frames", None) is not None:
        out["sim.n_frames"] = args.n_frames
    if getattr(args, "count", None) is not None:
        out["count"] = args.count
    if getattr(args, "max_iters", None) is not None:
        out["optim.max_iters"] = args.max_iters
    if getattr(args, "lr", None) is not None:
        out["optim.lr"] = args.lr
    if getattr(args, "patch_size", None) is not None:
        out["patch_size"] = args.patch_size
    return out


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line", 2)
    try:
        user = _load_user_config(args.config)
        overrides = {**_parse_set(args.set), **_flag_overrides(args)}
        cfg = resolve_config(args.command, user, overrides)
        jobs = worker_count(args.jobs)
        print(json.dumps({"command": args.command, "config": cfg}, indent=2, sort_keys=True))
        sys.stdout.flush()
        out = _prepare_out(Path(args.out))
        _dump(cfg, out / "config.json")
        if args.command == "simulate":
            result = cmd_simulate(cfg, out, jobs)
        elif args.command == "estimate":
            result = cmd_estimate(cfg, out, jobs, Path(args.series))
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, out, jobs, Path(args.truth), Path(args.estimate))
        elif args.command == "gradcheck":
            result = cmd_gradcheck(cfg, out, jobs)
        elif args.command == "project-divfree":
            result = cmd_project_divfree(cfg, out, jobs, Path(args.velocity))
        else:
            result = cmd_fit_repr(cfg, out, jobs, Path(args.velocity), Path(args.diffusion))
    except JobError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (ValueError, FloatingPointError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps({"result": result}, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
