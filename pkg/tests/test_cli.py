import json

import numpy as np
import pytest

from adiff.cli import main, resolve_config, worker_count, UsageError
from adiff.fields import Grid, TensorField, VectorField, read_field, write_field


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sample(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "2", "--dims", "16", "16", "--n-frames", "6",
                 "--out", str(root / "s")]) == 0
    return root / "s"


def test_resolve_config_is_strict():
    cfg = resolve_config("estimate", {"optim": {"lr": 0.5}}, {"loss.w_ss": 0.0, "seed": 1})
    assert cfg["optim"]["lr"] == 0.5 and cfg["loss"]["w_ss"] == 0.0
    assert cfg["loss"]["w_grad"] == 0.5 and cfg["loss"]["n_out"] == 10
    with pytest.raises(UsageError):
        resolve_config("estimate", {"optim": {"bogus": 1}}, {})
    with pytest.raises(UsageError):
        resolve_config("gradcheck", {"sim": {}}, {})


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("ADIFF_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("ADIFF_THREADS")
    assert worker_count(8) == 8


def test_simulate_prints_config_and_writes_sample(sample, capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--seed", "2", "--dims", "16", "16", "--n-frames", "6",
                       "--out", str(tmp_path / "again"))
    assert code == 0
    first = json.loads(out[: out.index("\n}\n") + 2])
    assert first["config"]["sim"]["dims"] == [16, 16]
    assert first["config"]["sim"]["lam_range"] == [0.0, 1.0]
    assert (sample / "series" / "manifest.json").exists()
    a = (sample / "truth" / "velocity.adgf").read_bytes()
    assert a == (tmp_path / "again" / "truth" / "velocity.adgf").read_bytes()


def test_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--out", str(tmp_path))
    assert code == 2 and json.loads(err.splitlines()[-1])["error"] == "usage"
    code, _, err = run(capsys, "simulate", "--seed", "1", "--dims", "2", "2", "--out", str(tmp_path))
    assert code == 2 and "usage" in err
    cfg = tmp_path / "c.json"
    cfg.write_text('{"unknown": 1}')
    code, _, err = run(capsys, "simulate", "--seed", "1", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2 and "unknown" in err


def test_estimate_and_evaluate(sample, capsys, tmp_path):
    est = tmp_path / "est"
    code, out, _ = run(capsys, "estimate", str(sample), "--seed", "1", "--max-iters", "0",
                       "--out", str(est))
    assert code == 0
    report = json.loads((est / "report.json").read_text())
    assert report["checks"] == {"divergence_free": True, "psd": True}
    assert (est / "history.csv").read_text().count("\n") == 2
    assert np.all(read_field(est / "velocity.adgf").components == 0.0)  # init dump
    code, _, _ = run(capsys, "evaluate", str(sample), str(sample), "--out", str(tmp_path / "ev"))
    assert code == 0
    rows = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "sample,metric,value"
    assert {r.split(",")[1] for r in rows[1:]} == {"Err_V", "Err_D", "Err_U", "Err_Lambda", "Err_C"}
    assert all(float(r.split(",")[2]) == 0.0 for r in rows[1:])


def test_estimate_missing_series(capsys, tmp_path):
    code, _, err = run(capsys, "estimate", str(tmp_path / "nowhere"), "--seed", "1",
                       "--out", str(tmp_path / "o"))
    assert code == 1 and json.loads(err)["error"] == "job"


def test_evaluate_grid_mismatch(sample, capsys, tmp_path):
    other = tmp_path / "other"
    assert main(["simulate", "--seed", "2", "--dims", "20", "20", "--n-frames", "6",
                 "--out", str(other)]) == 0
    capsys.readouterr()
    code, _, err = run(capsys, "evaluate", str(sample), str(other), "--out", str(tmp_path / "e"))
    assert code == 1 and "mismatch" in err


def test_gradcheck_default_passes(capsys, tmp_path):
    code, _, _ = run(capsys, "gradcheck", "--set", "gradcheck.n_coords=32", "--out", str(tmp_path))
    assert code == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["pass"]
    code, _, err = run(capsys, "gradcheck", "--set", "gradcheck.n_coords=8",
                       "--set", "gradcheck.tol=0", "--out", str(tmp_path / "z"))
    assert code == 1 and "gradient check failed" in err


def test_project_and_fit(sample, capsys, tmp_path):
    v = sample / "truth" / "velocity.adgf"
    code, _, _ = run(capsys, "project-divfree", str(v), "--out", str(tmp_path / "p"))
    assert code == 0
    assert json.loads((tmp_path / "p" / "report.json").read_text())["rae_vs_input"] <= 1e-2
    g = Grid((6, 6))
    write_field(VectorField(g, np.zeros((2, 6, 6))), tmp_path / "zv.adgf")
    write_field(TensorField(g, np.zeros((3, 6, 6))), tmp_path / "zd.adgf")
    code, _, _ = run(capsys, "fit-repr", str(tmp_path / "zv.adgf"), str(tmp_path / "zd.adgf"),
                     "--out", str(tmp_path / "f"))
    assert code == 0
    assert json.loads((tmp_path / "f" / "report.json").read_text())["loss"] <= 1e-8
    code, _, err = run(capsys, "fit-repr", str(tmp_path / "zd.adgf"), str(tmp_path / "zd.adgf"),
                       "--out", str(tmp_path / "f2"))
    assert code == 1 and "expected VectorField" in err
