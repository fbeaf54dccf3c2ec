import hashlib
import json

import numpy as np
import pytest

from slowspec.basis import BasisSet
from slowspec.cli import PRESETS, QUARTIC_CENTERS, ConfigError, load_config, main
from slowspec.eigensolver import SpectralModel, ritz_solve
from slowspec.reference import quadrature_H

FAST_DW = ["--set", "simulation.n_steps=20000", "--set", "reference.convergence=false"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_presets_validate():
    for name in PRESETS:
        cfg = load_config(preset=name)
        assert cfg["schema_version"] == 1


def test_quartic_preset_settings():
    cfg = load_config(preset="quartic-gauss13")
    assert cfg["simulation"]["dt"] == 1e-3 and cfg["simulation"]["n_steps"] == 10**7
    assert cfg["basis"]["centers"] == QUARTIC_CENTERS
    wide = {c for c, s in zip(cfg["basis"]["centers"], cfg["basis"]["sigmas"]) if s == 1.0}
    assert wide == {-2.0, -1.5, 0.0, 1.5, 2.0}
    assert set(cfg["basis"]["sigmas"]) == {1.0, 0.5}
    assert cfg["msm"]["bins"] == 100
    assert {10, 20, 50, 100} <= set(cfg["lags"])


def test_double_well_presets():
    assert load_config(preset="doublewell-msm20")["basis"]["bins"] == 20
    assert load_config(preset="doublewell-hermite20")["basis"]["n"] == 20
    g = load_config(preset="doublewell-gauss11")["basis"]
    assert g["centers"] == list(np.arange(-5.0, 6.0)) and g["sigmas"] == [1.0] * 11


def test_overrides_and_config_file(tmp_path):
    cfg = load_config(preset="doublewell-hermite20", overrides=["simulation.seed=7", "basis.n=5"])
    assert cfg["simulation"]["seed"] == 7 and cfg["basis"]["n"] == 5
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"simulation": {"n_steps": 10}}))
    assert load_config(f, "doublewell-hermite20")["simulation"]["n_steps"] == 10
    with pytest.raises(ConfigError):
        load_config(preset="doublewell-hermite20", overrides=["solver=qr"])
    with pytest.raises(ConfigError):
        load_config(preset="doublewell-hermite20", overrides=["lags=[0]"])
    with pytest.raises(ConfigError):
        load_config(preset="doublewell-hermite20", overrides=["schema_version=2"])


def test_bad_config_exit_code(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    assert main(["simulate", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    f.write_text(json.dumps({"schema_version": 1, "potential": {"kind": "nope", "params": []}}))
    assert main(["simulate", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    assert main(["estimate", "--preset", "doublewell-hermite20", "--out", str(tmp_path / "empty")]) == 2


def test_threads_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("SLOWSPEC_THREADS", "many")
    assert main(["simulate", "--preset", "doublewell-hermite20", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("SLOWSPEC_THREADS", "1")
    assert main(["simulate", "--preset", "doublewell-hermite20", "--out", str(tmp_path), *FAST_DW]) == 0


def test_flat_smoke(tmp_path):
    cfg = {
        "schema_version": 1,
        "potential": {"kind": "flat", "params": []},
        "simulation": {"x0": 0.0, "dt": 0.01, "n_steps": 5000, "seed": 2},
        "basis": {"kind": "hermite", "n": 3},
        "density": {"kind": "histogram", "bins": 20, "range": "data"},
        "lags": [1, 2],
    }
    f = tmp_path / "flat.json"
    f.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(f), "--out", str(out)]) == 0
    assert main(["estimate", "--config", str(f), "--out", str(out)]) == 0
    lines = (out / "timescales.csv").read_text().splitlines()
    assert lines[0].startswith("lag,tau,lambda1")
    assert len(lines) == 3


def test_simulate_and_estimate_reproducible(tmp_path):
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--preset", "doublewell-gauss11", "--out", str(out), *FAST_DW]) == 0
        assert main(["estimate", "--preset", "doublewell-gauss11", "--out", str(out), *FAST_DW]) == 0
        digests.append([_sha(out / f) for f in ("trajectory.slowtraj", "S.csv", "H_lag1.csv", "model_lag1.json", "timescales.csv")])
    assert digests[0] == digests[1]
    assert (tmp_path / "a" / "slowspec.log").exists()


def test_msm_estimate_outputs(tmp_path):
    out = tmp_path / "msm"
    assert main(["simulate", "--preset", "doublewell-msm20", "--out", str(out), *FAST_DW]) == 0
    assert main(["estimate", "--preset", "doublewell-msm20", "--out", str(out), *FAST_DW]) == 0
    T = np.loadtxt(out / "T_lag1.csv", delimiter=",")
    assert T.shape == (20, 20)
    model = SpectralModel.load(out / "model_lag1.json")
    assert model.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)


def test_quartic_pipeline_small(tmp_path):
    out = tmp_path / "q"
    small = ["--set", "simulation.n_steps=200000", "--set", "lags=[10, 20]"]
    assert main(["simulate", "--preset", "quartic-gauss13", "--out", str(out), *small]) == 0
    assert main(["estimate", "--preset", "quartic-gauss13", "--out", str(out), *small]) == 0
    summary = json.loads((out / "timescales.json").read_text())
    assert [r["lag"] for r in summary["lags"]] == [10, 20]
    assert [r["lag"] for r in summary["msm"]] == [10, 20]
    assert (out / "msm_timescales.csv").exists()


@pytest.fixture(scope="module")
def reference_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ref")
    assert main(["reference", "--preset", "doublewell-hermite20", "--out", str(out)]) == 0
    return out


def test_reference_tables(reference_dir):
    rows = (reference_dir / "reference_eigenvalues.csv").read_text().splitlines()
    assert rows[0] == "index,lambda,t"
    lam2 = float(rows[2].split(",")[1])
    assert lam2 == pytest.approx(0.998913, abs=1e-5)
    report = json.loads((reference_dir / "reference_report.json").read_text())
    assert report["max_eigenvalue_change"] < 1e-6
    assert report["phi1_vs_sqrt_mu_grid"] < 1e-6
    assert report["detailed_balance_residual"] < 1e-8
    check = np.loadtxt(reference_dir / "phi1_check.csv", delimiter=",", skiprows=1)
    assert check.shape[1] == 4


def test_compare_hermite_quadrature_model(reference_dir, tmp_path, dw):
    b = BasisSet.hermite(20)
    model = ritz_solve(quadrature_H(dw, b, 0.025), b, 0.025)
    path = model.save(tmp_path / "hermite.json")
    out = tmp_path / "cmp"
    code = main(["compare", str(path), "--reference", str(reference_dir / "reference.json"), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "compare.json").read_text())
    pair2 = report["models"][0]["eigenpairs"][1]
    assert pair2["l2_deviation"] < 0.01
    assert abs(pair2["gap"]) < 1e-4
    first = (out / "compare.csv").read_bytes()
    assert main(["compare", str(path), "--reference", str(reference_dir / "reference.json"), "--out", str(out)]) == 0
    assert (out / "compare.csv").read_bytes() == first


def test_compare_bound_violation(reference_dir, tmp_path):
    bogus = SpectralModel(np.array([1.0, 0.9995]), np.eye(2), BasisSet.hermite(2), 0.025)
    path = bogus.save(tmp_path / "bogus.json")
    code = main(["compare", str(path), "--reference", str(reference_dir / "reference.json"), "--out", str(tmp_path)])
    assert code == 4
    assert main(["compare", str(tmp_path / "missing.json"), "--reference", str(reference_dir / "reference.json"), "--out", str(tmp_path)]) == 2


def test_scan_command(tmp_path):
    args = ["--preset", "doublewell-hermite20", "--set", "scan.n=9"]
    assert main(["scan", *args, "--out", str(tmp_path / "a")]) == 0
    assert main(["scan", *args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "scan.csv").read_bytes() == (tmp_path / "b" / "scan.csv").read_bytes()
    res = json.loads((tmp_path / "a" / "scan.json").read_text())
    assert res["rayleigh"] <= 0.99891318 + 1e-6


def test_scan_empty_range(tmp_path):
    code = main(["scan", "--preset", "doublewell-hermite20", "--set", "scan.y_range=[2, 1]", "--out", str(tmp_path)])
    assert code == 2


def test_numeric_failure_exit_code(tmp_path):
    code = main(["reference", "--preset", "quartic-gauss13", "--set", "reference.tau=0.1", "--out", str(tmp_path)])
    assert code == 3
