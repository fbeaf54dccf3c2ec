"""Command-line front end: ``slowspec simulate|estimate|reference|compare|scan``.

Every command is a pure function of its configuration and input files. Data
files carry no timestamps; a timestamped log goes to ``slowspec.log`` in the
output directory.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 variational bound violated in ``compare``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .basis import BasisKind, BasisSet
from .dynamics import DivergenceError, PotentialSpec, load_trajectory, simulate
from .eigensolver import SpectralModel, implied_timescales, ritz_solve, roothaan_hall_solve
from .estimation import (
    EstimationError,
    data_edges,
    estimate_H_lags,
    estimate_msm_transition_matrix,
    estimate_stationary_density,
    msm_density_matrix,
    save_matrix,
)
from .reference import Grid, GridError, GridSpectrum, build_grid_propagator, default_grid, reference_spectrum

log = logging.getLogger("slowspec")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BOUND = 0, 2, 3, 4

QUARTIC_CENTERS = [-2.0, -1.5, -1.2, -1.0, -0.8, -0.5, 0.0, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0]
# the stated "variances" are used as the Gaussian width parameter
QUARTIC_WIDTHS = [1.0 if c in (-2.0, -1.5, 0.0, 1.5, 2.0) else 0.5 for c in QUARTIC_CENTERS]

_DOUBLEWELL = {
    "schema_version": SCHEMA_VERSION,
    "potential": {"kind": "double_gaussian", "params": [-2.0, 2.0, 1.0, 1.0]},
    "simulation": {"x0": -2.0, "dt": 0.025, "n_steps": 10_000_000, "seed": 1, "stride": 1},
    "density": {"kind": "histogram", "bins": 1000, "range": "data"},
    "lags": [1],
    "reference": {"tau": 0.025, "k": 4, "convergence": True},
    "scan": {"y_range": [0.2, 3.0], "s_range": [0.2, 3.0], "n": 41},
}

PRESETS = {
    "doublewell-msm20": {
        **_DOUBLEWELL,
        "basis": {"kind": "indicator", "range": [-6.0, 6.0], "bins": 20},
        "solver": "msm",
    },
    "doublewell-hermite20": {**_DOUBLEWELL, "basis": {"kind": "hermite", "n": 20}, "solver": "ritz"},
    "doublewell-gauss11": {
        **_DOUBLEWELL,
        "basis": {"kind": "gaussian", "centers": [float(c) for c in range(-5, 6)], "sigmas": [1.0] * 11},
        "solver": "roothaan-hall",
    },
    "quartic-gauss13": {
        "schema_version": SCHEMA_VERSION,
        "potential": {"kind": "quartic", "params": [3.0, -6.0, 3.0]},
        "simulation": {"x0": -1.0, "dt": 1e-3, "n_steps": 10_000_000, "seed": 1, "stride": 1},
        "basis": {"kind": "gaussian", "centers": QUARTIC_CENTERS, "sigmas": QUARTIC_WIDTHS},
        "solver": "roothaan-hall",
        "density": {"kind": "histogram", "bins": 1000, "range": "data"},
        "msm": {"bins": 100, "range": "data"},
        "lags": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "reference": {"tau": 1e-3, "k": 4, "convergence": False},
    },
}

SOLVERS = ("ritz", "roothaan-hall", "msm")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


# -- configuration -----------------------------------------------------------


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, preset=None, overrides=()):
    """Build a configuration from a preset, a JSON file and ``key=value`` overrides."""
    if path is None and preset is None:
        raise ConfigError("need --config or --preset")
    cfg = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key.strip(), value)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Check a configuration before any computation; raises :class:`ConfigError`."""
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    try:
        potential(cfg)
        if "basis" in cfg:
            build_basis(cfg, validate_only=True)
        for key in ("density", "msm"):
            if cfg.get(key, {}).get("kind", "histogram") != "analytic" and key in cfg:
                _edges(cfg[key], None)
        if "grid" in cfg and cfg["grid"] is not None:
            _grid(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    lags = cfg.get("lags", [1])
    if not isinstance(lags, list) or not lags or not all(isinstance(m, int) and not isinstance(m, bool) and m > 0 for m in lags):
        raise ConfigError("lags must be a non-empty list of positive integers")
    if cfg.get("solver", "ritz") not in SOLVERS:
        raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}")
    sim = cfg.get("simulation", {})
    for key in ("dt", "n_steps", "seed", "stride", "x0"):
        if key in sim and (isinstance(sim[key], bool) or not isinstance(sim[key], (int, float))):
            raise ConfigError(f"simulation.{key} must be a number")
    traj = cfg.get("trajectory")
    if traj is not None and not Path(traj).exists():
        raise ConfigError(f"trajectory file not found: {traj}")


def potential(cfg):
    return PotentialSpec.from_dict(cfg["potential"])


def _grid(cfg):
    g = cfg.get("grid")
    if not g:
        return default_grid(potential(cfg))
    return Grid(float(g["a"]), float(g["b"]), int(g["n"]), g.get("rule", "trapezoid"))


def _edges(spec, traj):
    """Bin edges from ``{"bins", "range"}``; ``range: "data"`` spans the trajectory."""
    bins = int(spec["bins"])
    if bins < 1:
        raise ValueError("bins must be positive")
    rng = spec.get("range", "data")
    if rng == "data":
        return data_edges(traj, bins) if traj is not None else np.linspace(-1.0, 1.0, bins + 1)
    lo, hi = float(rng[0]), float(rng[1])
    if not lo < hi:
        raise ValueError("bin range must be ordered")
    return np.linspace(lo, hi, bins + 1)


def build_basis(cfg, traj=None, density=None, validate_only=False):
    """Basis from the config; indicator bases use ``density`` when given."""
    spec = cfg["basis"]
    kind = BasisKind(spec["kind"])
    if kind is BasisKind.HERMITE:
        return BasisSet.hermite(int(spec["n"]))
    if kind is BasisKind.GAUSSIAN:
        return BasisSet.gaussian(spec["centers"], spec["sigmas"])
    edges = np.asarray(spec["edges"], dtype=float) if "edges" in spec else _edges(spec, traj)
    if validate_only:
        return BasisSet.indicator(edges, np.ones(edges.size - 1))
    if density is None:
        return BasisSet.indicator(edges, potential=potential(cfg))
    return BasisSet.indicator(edges, density=density)


# -- helpers -----------------------------------------------------------------


def _fmt(v):
    return f"{v:.17g}"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with Path(path).open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(float(v)) if not isinstance(v, str) else v for v in row) + "\n")


def _out_dir(args, cfg):
    out = Path(args.out or cfg.get("output", "slowspec-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_log(out):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(out / "slowspec.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(sh)


def _trajectory_path(cfg, out):
    if cfg.get("trajectory"):
        return Path(cfg["trajectory"])
    return out / "trajectory.slowtraj"


# -- commands ----------------------------------------------------------------


def cmd_simulate(cfg, out):
    """Simulate and write ``trajectory.slowtraj`` plus its JSON sidecar."""
    p = potential(cfg)
    sim = cfg["simulation"]
    traj = simulate(p, float(sim["x0"]), float(sim["dt"]), int(sim["n_steps"]), int(sim["seed"]), int(sim.get("stride", 1)))
    path = out / "trajectory.slowtraj"
    traj.save(path)
    _write_json(path.with_suffix(".json"), traj.sidecar())
    log.info("wrote %s (%d frames)", path, traj.n_frames)
    return path


def _density(cfg, traj):
    spec = cfg.get("density", {"kind": "histogram", "bins": 1000, "range": "data"})
    if spec.get("kind", "histogram") == "analytic":
        return potential(cfg).density, None
    est = estimate_stationary_density(traj, _edges(spec, traj))
    return est, est


def _msm_model(traj, edges, lag, frame_dt, density, p):
    msm = estimate_msm_transition_matrix(traj, edges, lag)
    a = msm.active
    sub = ritz_solve(msm_density_matrix(msm), tau=lag * frame_dt)
    coef = np.zeros((edges.size - 1, sub.coefficients.shape[1]))
    coef[a] = sub.coefficients
    pi = np.where(msm.pi > 0, msm.pi, 1.0)
    basis = BasisSet.indicator(edges, pi, density=density, potential=p, weight_source="estimated")
    meta = dict(sub.metadata, lag=lag, frame_dt=frame_dt, unvisited=list(msm.unvisited), support=[float(edges[0]), float(edges[-1])])
    return msm, SpectralModel(sub.eigenvalues, coef, basis, lag * frame_dt, "msm", meta)


def cmd_estimate(cfg, out):
    """Estimate spectral models at every lag from the trajectory."""
    path = _trajectory_path(cfg, out)
    if not path.exists():
        raise ConfigError(f"trajectory file not found: {path} (run simulate first)")
    p = potential(cfg)
    traj = load_trajectory(path, p)
    lags = sorted(cfg.get("lags", [1]))
    solver = cfg.get("solver", "ritz")
    mu, est = _density(cfg, traj)
    support = None
    if est is not None:
        est.to_csv(out / "mu_hat.csv")
        support = [float(est.edges[0]), float(est.edges[-1])]
    rows = []
    if solver == "msm":
        edges = np.asarray(cfg["basis"]["edges"], float) if "edges" in cfg["basis"] else _edges(cfg["basis"], traj)
        for m in lags:
            msm, model = _msm_model(traj, edges, m, traj.dt, mu, p)
            save_matrix(out / f"T_lag{m}.csv", msm.T)
            save_matrix(out / f"C_lag{m}.csv", msm.counts)
            model.save(out / f"model_lag{m}.json")
            rows.append((m, m * traj.dt, model.eigenvalues, model.timescales))
    else:
        b = build_basis(cfg, traj, density=mu)
        mats = estimate_H_lags(traj, b, mu, [0] + lags)
        S = mats[0]
        save_matrix(out / "S.csv", S)
        for m in lags:
            H = mats[m]
            save_matrix(out / f"H_lag{m}.csv", H)
            if solver == "ritz":
                model = ritz_solve(H, b, m * traj.dt)
            else:
                model = roothaan_hall_solve(H, S, b, m * traj.dt)
            model.metadata.update(lag=m, frame_dt=traj.dt, support=support)
            model.save(out / f"model_lag{m}.json")
            rows.append((m, m * traj.dt, model.eigenvalues, model.timescales))
    k = min(4, min(r[2].size for r in rows))
    header = ["lag", "tau"] + [f"lambda{i + 1}" for i in range(k)] + [f"t{i + 1}" for i in range(k)]
    _write_csv(out / "timescales.csv", header, [(m, t, *ev[:k], *ts[:k]) for m, t, ev, ts in rows])
    summary = {"solver": solver, "lags": [{"lag": m, "tau": t, "eigenvalues": ev[:k].tolist(), "timescales": [None if not np.isfinite(x) else float(x) for x in ts[:k]]} for m, t, ev, ts in rows]}
    if "msm" in cfg and solver != "msm":
        edges = _edges(cfg["msm"], traj)
        msm_rows = []
        for m in lags:
            _, model = _msm_model(traj, edges, m, traj.dt, mu, p)
            model.save(out / f"msm_model_lag{m}.json")
            msm_rows.append((m, m * traj.dt, *model.eigenvalues[:k], *model.timescales[:k]))
        _write_csv(out / "msm_timescales.csv", header, msm_rows)
        summary["msm"] = [{"lag": r[0], "t2": float(r[2 + k + 1])} for r in msm_rows]
    _write_json(out / "timescales.json", summary)
    for m, t, ev, ts in rows:
        log.info("lag %d: lambda2 = %.8f, t2 = %.6g", m, ev[1], ts[1])
    return rows


def cmd_reference(cfg, out):
    """Grid reference spectrum, convergence report and first-eigenfunction check."""
    p = potential(cfg)
    rc = cfg.get("reference", {})
    tau = float(rc.get("tau", cfg.get("simulation", {}).get("dt", 0.025)))
    k = int(rc.get("k", 4))
    grid = _grid(cfg)
    gp = build_grid_propagator(p, tau, grid)
    spec = reference_spectrum(gp, k)
    _write_json(out / "reference.json", spec.to_dict())
    spec.eigenfunction_table(out / "reference_eigenfunctions.csv")
    _write_csv(out / "reference_eigenvalues.csv", ["index", "lambda", "t"],
               [(i + 1, lam, t) for i, (lam, t) in enumerate(zip(spec.eigenvalues, spec.timescales()))])
    phi1 = spec.eigenfunctions[0]
    sqrt_mu_grid = np.sqrt(gp.mu)
    sqrt_mu = np.sqrt(p.density(grid.nodes)) if p.kind.value != "flat" else np.full(grid.n, np.nan)
    _write_csv(out / "phi1_check.csv", ["x", "phi1", "sqrt_mu_grid", "sqrt_mu"],
               zip(grid.nodes, phi1, sqrt_mu_grid, sqrt_mu))
    report = {
        "tau": tau,
        "grid": grid.to_dict(),
        "eigenvalues": spec.eigenvalues.tolist(),
        "leak": gp.leak,
        "irreversibility": gp.irreversibility,
        "detailed_balance_residual": gp.detailed_balance_residual(),
        "phi1_vs_sqrt_mu_grid": float(np.abs(phi1 - sqrt_mu_grid).max()),
    }
    if rc.get("convergence", False):
        fine = reference_spectrum(build_grid_propagator(p, tau, grid.refined()), k)
        report["refined_grid"] = grid.refined().to_dict()
        report["refined_eigenvalues"] = fine.eigenvalues.tolist()
        report["max_eigenvalue_change"] = float(np.abs(fine.eigenvalues - spec.eigenvalues).max())
    _write_json(out / "reference_report.json", report)
    log.info("reference eigenvalues at tau=%g: %s", tau, " ".join(f"{v:.8f}" for v in spec.eigenvalues))
    return spec


def compare_models(models, ref: GridSpectrum, tol=1e-6):
    """Eigenvalue, eigenfunction and timescale comparison against a reference.

    Eigenfunction deviations are L2 norms on the reference grid, restricted
    to the model's recorded support when it has one.

    Returns ``(report, ok)`` where ``ok`` says whether every model eigenvalue
    respects the variational bound ``lambda_hat_i <= lambda_i + tol``.
    """
    report, ok = [], True
    for name, model in models:
        # the model is only defined on the support of the density it was built with
        x, w = ref.grid.nodes, ref.grid.weights
        support = model.metadata.get("support")
        if support:
            inside = (x >= support[0]) & (x <= support[1])
            x, w = x[inside], w[inside]
        tau = model.tau if model.tau is not None else ref.tau
        lam_ref = ref.eigenvalues_at(tau)
        k = min(lam_ref.size, model.eigenvalues.size)
        entries = []
        for i in range(k):
            phi_hat = model(i + 1, x)
            phi = ref.phi(i + 1, x)
            if np.sum(w * phi_hat * phi) < 0:
                phi_hat = -phi_hat
            l2 = float(np.sqrt(np.sum(w * (phi_hat - phi) ** 2)))
            bound = bool(model.eigenvalues[i] <= lam_ref[i] + tol)
            ok &= bound
            entries.append({
                "index": i + 1,
                "lambda_model": float(model.eigenvalues[i]),
                "lambda_ref": float(lam_ref[i]),
                "gap": float(lam_ref[i] - model.eigenvalues[i]),
                "l2_deviation": l2,
                "t_model": float(implied_timescales(model.eigenvalues[i:i + 1], tau)[0]),
                "t_ref": float(implied_timescales(lam_ref[i:i + 1], tau)[0]),
                "bound_ok": bound,
            })
        report.append({"model": name, "tau": tau, "support": support, "eigenpairs": entries})
    return report, ok


def cmd_compare(model_paths, ref_path, out, tol=1e-6):
    ref = GridSpectrum.from_dict(json.loads(Path(ref_path).read_text()))
    models = [(str(m), SpectralModel.load(m)) for m in model_paths]
    report, ok = compare_models(models, ref, tol)
    _write_json(out / "compare.json", {"reference": str(ref_path), "tolerance": tol, "models": report, "bound_ok": ok})
    rows = [(r["model"], r["tau"], e["index"], e["lambda_model"], e["lambda_ref"], e["gap"], e["l2_deviation"], e["t_model"], e["t_ref"])
            for r in report for e in r["eigenpairs"]]
    _write_csv(out / "compare.csv", ["model", "tau", "index", "lambda_model", "lambda_ref", "gap", "l2_deviation", "t_model", "t_ref"], rows)
    for r in report:
        e = r["eigenpairs"]
        if len(e) > 1:
            log.info("%s: lambda2 %.6f vs %.6f, L2(phi2) %.3g", r["model"], e[1]["lambda_model"], e[1]["lambda_ref"], e[1]["l2_deviation"])
    if not ok:
        log.error("variational bound violated beyond tolerance %g", tol)
    return ok


def cmd_scan(cfg, out):
    """Nonlinear ansatz scan and refinement."""
    from .nonlinear import optimize_ansatz

    p = potential(cfg)
    sc = cfg.get("scan", {})
    y_range = tuple(sc.get("y_range", (0.2, 3.0)))
    s_range = tuple(sc.get("s_range", (0.2, 3.0)))
    if len(y_range) != 2 or len(s_range) != 2 or not y_range[0] < y_range[1] or not s_range[0] < s_range[1] or not s_range[0] > 0:
        raise ConfigError("scan ranges must be ordered pairs (lo < hi) with positive widths")
    tau = float(cfg.get("reference", {}).get("tau", cfg.get("simulation", {}).get("dt", 0.025)))
    res = optimize_ansatz(p, tau, _grid(cfg), y_range, s_range, int(sc.get("n", 41)))
    res.to_csv(out / "scan.csv")
    _write_json(out / "scan.json", res.to_dict())
    log.info("best ansatz y2=%.4f s2=%.4f rayleigh=%.8f (%d local maxima)", res.center, res.width, res.value, len(res.local_maxima))
    return res


# -- entry point ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="slowspec", description="Variational estimation of slow eigenpairs of 1D diffusions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named preset (config keys override it)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. simulation.seed=3")

    for name in ("simulate", "estimate", "reference", "scan"):
        common(sub.add_parser(name))
    cp = sub.add_parser("compare")
    cp.add_argument("models", nargs="+", help="model JSON files")
    cp.add_argument("--reference", required=True, help="reference.json from the reference command")
    cp.add_argument("--out", default=".", help="output directory")
    cp.add_argument("--tol", type=float, default=1e-6, help="variational bound tolerance")
    return parser


def _run(args):
    if args.command == "compare":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _setup_log(out)
        for f in [*args.models, args.reference]:
            if not Path(f).exists():
                raise ConfigError(f"file not found: {f}")
        return EXIT_OK if cmd_compare(args.models, args.reference, out, args.tol) else EXIT_BOUND
    cfg = load_config(args.config, args.preset, args.set)
    out = _out_dir(args, cfg)
    _setup_log(out)
    {"simulate": cmd_simulate, "estimate": cmd_estimate, "reference": cmd_reference, "scan": cmd_scan}[args.command](cfg, out)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = os.environ.get("SLOWSPEC_THREADS")
    if threads and not threads.isdigit():
        print("slowspec: config error: SLOWSPEC_THREADS must be a positive integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return _run(args)
        return _run(args)
    except ConfigError as exc:
        print(f"slowspec: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, EstimationError, GridError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"slowspec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
