"""Command-line front end: experiment configs, presets, metrics and hyperparameter fitting.

Usage::

    gpsdd --preset toy-regression --out runs/toy
    gpsdd --config my.json --seed 3 --out runs/x

Every run directory holds ``config.json`` (the resolved config), the CSV
traces of the task and ``summary.json`` (schema version :data:`SCHEMA_VERSION`).
Wall-clock timings go to ``timings.json`` so that the summary is
byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .core import (DataError, Dataset, NoiseModel, RngStream, SplitSpec, apply_standardization, load_csv,
                   split, standardize)
from .exact_gp import evidence, fit_exact, linear_model_evidence
from .kernels import KernelSpec, canonical_family, feature_eval, gram, sample_features
from .linalg import DENSE_CAP, cg_solve
from .sgd import (SOLVERS, OptimiserConfig, draw_posterior_samples, evaluate_sample, kernel_operator,
                  oracle_monitor, sdd_solve, solve_representer)

log = logging.getLogger("gpsdd")

SCHEMA_VERSION = 1
TASKS = ("regression", "sampling-diagnostics", "em", "bayesopt", "ct-design")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

def metric_rmse(preds, targets) -> float:
    p, t = np.asarray(preds, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def sample_variance(samples) -> np.ndarray:
    """Unbiased variance across sample columns; needs at least two samples per point."""
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ValueError("need at least two samples per point")
    return S.var(axis=1, ddof=1)


def metric_nll(means, variances, targets, noise_variance: float) -> float:
    """Mean negative Gaussian log density with predictive variance ``var + b^-1`` (floored at 1e-8)."""
    m, v, t = (np.asarray(a, dtype=float) for a in (means, variances, targets))
    if not (m.shape == v.shape == t.shape):
        raise ValueError(f"length mismatch: {m.shape}, {v.shape}, {t.shape}")
    s2 = np.maximum(v + noise_variance, 1e-8)
    return float(np.mean(0.5 * np.log(2 * np.pi * s2) + 0.5 * (t - m) ** 2 / s2))


# ---------------------------------------------------------------- hyperparameters

def _fit_evidence(ds: Dataset, family: str, sweeps: int = 3, init: Optional[np.ndarray] = None,
                  bounds: float = 4.0 * np.log(10.0), cap: int = DENSE_CAP) -> np.ndarray:
    """Coordinate-wise bounded scalar search over ``log`` of (lengthscales, variance, noise variance)."""
    theta = np.zeros(ds.dim + 2) if init is None else np.array(init, dtype=float)

    def neg(th):
        spec = KernelSpec(family, np.exp(th[:ds.dim]), float(np.exp(th[ds.dim])))
        try:
            return -evidence(ds, spec, NoiseModel(float(np.exp(-th[ds.dim + 1]))), cap=cap)
        except np.linalg.LinAlgError:
            return np.inf

    for _ in range(sweeps):
        for i in range(theta.size):
            def f(v, i=i):
                th = theta.copy()
                th[i] = v
                return neg(th)
            res = minimize_scalar(f, bounds=(theta[i] - bounds, theta[i] + bounds), method="bounded",
                                  options={"xatol": 1e-3})
            if res.fun <= f(theta[i]):
                theta[i] = res.x
    return theta


def _unpack(theta: np.ndarray, family: str, dim: int):
    return (KernelSpec(family, np.exp(theta[:dim]), float(np.exp(theta[dim]))),
            NoiseModel(float(np.exp(-theta[dim + 1]))))


def centroid_hyperparams(ds: Dataset, family: str, subset_size: int = 10000, centroids: int = 10,
                         rng=0, sweeps: int = 3):
    """Average of per-centroid exact-evidence fits on nearest-neighbour subsets.

    Each centroid is a uniformly chosen data point; its ``subset_size``
    nearest neighbours form the fitting set. Averages are taken over the
    log-hyperparameters. Falls back to one full-data fit when
    ``n <= subset_size``.
    """
    family = canonical_family(family)
    if ds.n <= subset_size:
        return _unpack(_fit_evidence(ds, family, sweeps, cap=max(ds.n, DENSE_CAP)), family, ds.dim)
    gen = RngStream(rng).generator() if isinstance(rng, int) else rng.generator()
    tree = cKDTree(ds.inputs)
    thetas = []
    for c in gen.choice(ds.n, size=centroids, replace=False):
        _, idx = tree.query(ds.inputs[c], k=subset_size)
        thetas.append(_fit_evidence(ds.subset(np.sort(idx)), family, sweeps, cap=max(subset_size, DENSE_CAP)))
    return _unpack(np.mean(thetas, axis=0), family, ds.dim)


# ---------------------------------------------------------------- configuration

PRESETS: Dict[str, Dict[str, Any]] = {
    "toy-regression": {
        "task": "regression",
        "data": {"generator": "large-domain", "n": 10000},
        "kernel": {"family": "rbf", "lengthscale": 0.5, "variance": 1.0},
        "noise": {"std": 0.5},
        "solver": {"name": "sdd", "step_size_times_n": 50.0, "steps": 3000, "batch_size": 512},
        "grid_points": 200,
        "exact_oracle": True,
    },
    "toy-infill": {
        "task": "regression",
        "data": {"generator": "infill", "n": 10000},
        "kernel": {"family": "rbf", "lengthscale": 0.5, "variance": 1.0},
        "noise": {"std": 0.5},
        "solver": {"name": "sdd", "step_size_times_n": 4.0, "steps": 1953, "batch_size": 512},
        "grid_points": 200,
        "exact_oracle": True,
    },
    "em-toy": {
        "task": "em",
        "data": {"generator": "rff-toy", "n": 200, "features": 400},
        "kernel": {"family": "rbf", "lengthscale": 0.1, "variance": 1.0},
        "noise": {"std": 0.1},
        "em": {"samples": 16, "max_steps": 10, "tol": 1e-2, "initial_precision": 1.0},
    },
    "sampling-diagnostics": {
        "task": "sampling-diagnostics",
        "data": {"generator": "rff-toy", "n": 50, "features": 10},
        "kernel": {"family": "rbf", "lengthscale": 0.5, "variance": 1.0},
        "noise": {"std": 0.3},
        "diagnostics": {"draws": 20000, "precision": 1.0},
    },
    "bayesopt": {
        "task": "bayesopt",
        "kernel": {"family": "matern32", "lengthscale": 0.3, "variance": 1.0, "dim": 2},
        "noise": {"std": 0.0316},
        "bayesopt": {"n_init": 1000, "steps": 10, "batch_size": 100, "candidates": 1000, "top_k": 5,
                     "ascent_steps": 50, "prior_features": 1000, "shared": True},
        "solver": {"name": "sdd", "step_size_times_n": 1.0, "steps": 300, "batch_size": 512},
    },
    "ct-design": {
        "task": "ct-design",
        "ct": {"size": 32, "angles": 200, "pilot": 5, "total": 15, "samples": 500, "criterion": "ese",
               "noise_fraction": 0.05},
    },
}

DEFAULTS: Dict[str, Any] = {"seed": 0, "seeds": None, "out": "gpsdd-run"}


def _merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate_config(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Check a resolved config before any computation."""
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose one of {TASKS}")
    if "kernel" in cfg:
        try:
            canonical_family(cfg["kernel"].get("family", "rbf"))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    data = cfg.get("data", {})
    if "path" in data:
        if not os.path.isfile(data["path"]):
            raise ConfigError(f"data file not found: {data['path']}")
        if "target" not in data:
            raise ConfigError("data.target (target column name) is required with data.path")
    solver = cfg.get("solver", {})
    if solver and solver.get("name", "sdd") not in SOLVERS:
        raise ConfigError(f"unknown solver {solver.get('name')!r}; choose one of {SOLVERS}")
    if not isinstance(cfg.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    return cfg


def resolve_config(path: Optional[str] = None, preset: Optional[str] = None, task: Optional[str] = None,
                   seed: Optional[int] = None, out: Optional[str] = None) -> Dict[str, Any]:
    cfg = dict(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose one of {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                cfg = _merge(cfg, json.load(fh))
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {path}: {e}") from None
    for key, val in (("task", task), ("seed", seed), ("out", out)):
        if val is not None:
            cfg[key] = val
    return validate_config(cfg)


# ---------------------------------------------------------------- tasks

def _kernel(cfg, dim: int) -> KernelSpec:
    k = cfg.get("kernel", {})
    ls = k.get("lengthscale", 1.0)
    ls = np.full(dim, float(ls)) if np.isscalar(ls) else np.asarray(ls, dtype=float)
    return KernelSpec(k.get("family", "rbf"), ls, float(k.get("variance", 1.0)))


def _noise(cfg) -> NoiseModel:
    return NoiseModel.from_std(float(cfg.get("noise", {}).get("std", 0.1)))


def _optimiser(cfg, n: int, rng) -> OptimiserConfig:
    s = cfg.get("solver", {})
    return OptimiserConfig(step_size=float(s.get("step_size_times_n", 50.0)) / n, steps=int(s.get("steps", 1000)),
                           momentum=float(s.get("momentum", 0.9)), batch_size=int(s.get("batch_size", 512)),
                           rng=rng)


def synthetic_dataset(name: str, n: int, rng: RngStream) -> Dataset:
    gen = rng.generator()
    if name == "large-domain":
        X = np.linspace(-n / 200.0, n / 200.0, n)
    elif name == "infill":
        X = gen.standard_normal(n)
    elif name == "uniform":
        X = gen.uniform(-3, 3, n)
    else:
        raise ConfigError(f"unknown synthetic generator {name!r}")
    y = np.sin(2 * X) + np.cos(5 * X) + 0.5 * gen.standard_normal(n)
    return Dataset(X[:, None], y)


def _task_regression(cfg, root: RngStream, out: Path) -> Dict[str, Any]:
    data = cfg.get("data", {})
    summary: Dict[str, Any] = {}
    if "path" in data:
        full = load_csv(data["path"], data["target"])
        tr, te = split(full, SplitSpec(float(data.get("train_fraction", 0.9)), cfg["seed"]), root.child(0))
        train = standardize(tr)
        test = apply_standardization(te, train.standardization)
    else:
        train = synthetic_dataset(data.get("generator", "large-domain"), int(data.get("n", 1000)), root.child(0))
        test = None
    hp = cfg.get("hyperparameters", "fixed")
    if hp == "centroid":
        spec, noise = centroid_hyperparams(train, cfg.get("kernel", {}).get("family", "rbf"),
                                           int(data.get("subset_size", 10000)), int(data.get("centroids", 10)),
                                           root.child(1))
    else:
        spec, noise = _kernel(cfg, train.dim), _noise(cfg)
    summary["hyperparameters"] = {"lengthscales": spec.lengthscales.tolist(), "variance": spec.variance,
                                  "noise_precision": noise.precision}
    op = kernel_operator(train.inputs, spec, dense_cap=int(cfg.get("dense_cap", DENSE_CAP)))
    solver = cfg.get("solver", {}).get("name", "sdd")
    lo, hi = train.inputs.min(axis=0), train.inputs.max(axis=0)
    grid = np.linspace(lo, hi, int(cfg.get("grid_points", 200)))
    alpha_star = None
    if cfg.get("exact_oracle") and train.n <= int(cfg.get("oracle_cap", 10000)):
        alpha_star = fit_exact(train, spec, noise, cap=max(train.n, DENSE_CAP)).alpha
    if solver == "sdd":
        monitor = None
        if alpha_star is not None and op.array is not None:
            monitor = oracle_monitor(op.array, alpha_star)
        run = sdd_solve(op, train.targets, noise.precision, _optimiser(cfg, train.n, root.child(2)), monitor=monitor)
        run.write_trace(out / "solver_trace.csv")
        alpha = run.weights
    elif solver == "cg":
        res = cg_solve(op.shifted(noise.variance), train.targets, tol=float(cfg.get("cg_tol", 1e-2)),
                       max_iter=int(cfg.get("cg_max_iter", 1000)))
        res.write_residuals(out / "cg_residuals.csv")
        alpha = res.x
    else:
        alpha = solve_representer(op, train.targets, noise, solver, _optimiser(cfg, train.n, root.child(2)),
                                  train.inputs, spec)
    Kg = gram(spec, grid, train.inputs)
    np.savetxt(out / "grid_mean.csv", np.column_stack([grid, Kg @ alpha]), delimiter=",",
               header=",".join([f"x{j}" for j in range(train.dim)] + ["mean"]), comments="")
    if alpha_star is not None:
        summary["grid_rmse_to_exact"] = metric_rmse(Kg @ alpha, Kg @ alpha_star)
    if test is not None:
        mean = gram(spec, test.inputs, train.inputs) @ alpha
        summary["test_rmse"] = metric_rmse(mean, test.targets)
        k = int(cfg.get("samples", 0))
        if k >= 2:
            samples = draw_posterior_samples(train, spec, noise, k, root.child(3), alpha_mean=alpha, op=op,
                                             cfg=_optimiser(cfg, train.n, root.child(4)), solver=solver)
            vals = np.column_stack([evaluate_sample(s, test.inputs) for s in samples])
            summary["test_nll"] = metric_nll(mean, sample_variance(vals), test.targets, noise.variance)
    return summary


def _task_em(cfg, root: RngStream, out: Path) -> Dict[str, Any]:
    from .weightspace import FeatureModel, run_em
    data, em = cfg.get("data", {}), cfg.get("em", {})
    n, d = int(data.get("n", 200)), int(data.get("features", 400))
    gen = root.child(0).generator()
    X = np.sort(gen.uniform(-5, 5, n))
    noise = _noise(cfg)
    y = np.sin(2 * X) + 0.5 * np.cos(5 * X) + noise.variance ** 0.5 * gen.standard_normal(n)
    Phi = feature_eval(sample_features(_kernel(cfg, 1), d, root.child(1)), X)
    model = FeatureModel(Phi, noise.precision, float(em.get("initial_precision", 1.0)))
    state = run_em(model, y, int(em.get("samples", 16)), int(em.get("max_steps", 10)), float(em.get("tol", 1e-2)),
                   root.child(2), exact=bool(em.get("exact", False)))
    state.write_history(out / "em_history.csv")
    grid = np.logspace(-3, 5, 200)
    ev = [linear_model_evidence(Phi, y, a, noise.precision) for a in grid]
    return {"precision": state.precision, "steps": state.step, "converged": state.converged,
            "evidence_grid_argmax": float(grid[int(np.argmax(ev))])}


def _task_diagnostics(cfg, root: RngStream, out: Path) -> Dict[str, Any]:
    from .weightspace import (FeatureModel, gradient_identity_check, sample_objective_targets,
                              single_point_gradients)
    data, diag = cfg.get("data", {}), cfg.get("diagnostics", {})
    n, d = int(data.get("n", 50)), int(data.get("features", 10))
    gen = root.child(0).generator()
    X = gen.uniform(-3, 3, n)
    Phi = feature_eval(sample_features(_kernel(cfg, 1), d, root.child(1)), X)
    noise = _noise(cfg)
    model = FeatureModel(Phi, noise.precision, float(diag.get("precision", 1.0)))
    parts, eps = sample_objective_targets(model, 1, root.child(2))
    w = gen.standard_normal((d, 1))
    identity = gradient_identity_check(model, w, eps, parts)
    draws = int(diag.get("draws", 20000))
    z = np.zeros(d)
    g_std, g_low = np.empty((draws, d)), np.empty((draws, d))
    p0 = type(parts)(parts.prior[:, 0], parts.data[:, 0], parts.precision)
    for i in range(draws):
        j = int(gen.integers(n))
        e = gen.standard_normal() / np.sqrt(noise.precision)
        g_std[i], g_low[i] = single_point_gradients(model, z, j, e, p0)
    diff = float(g_std.var(axis=0, ddof=1).sum() - g_low.var(axis=0, ddof=1).sum())
    predicted = float(n * np.trace(model.curvature()))
    with open(out / "variance_at_init.csv", "w") as fh:
        fh.write("quantity,value\n")
        fh.write(f"measured_trace_difference,{diff!r}\npredicted_n_tr_M,{predicted!r}\n")
    return {"gradient_identity_max_deviation": identity, "trace_variance_difference": diff,
            "n_trace_M": predicted}


def _task_bayesopt(cfg, root: RngStream, out: Path) -> Dict[str, Any]:
    from .bayesopt import ThompsonConfig, run_benchmark
    bo = cfg.get("bayesopt", {})
    spec = _kernel(cfg, int(cfg.get("kernel", {}).get("dim", 2)))
    shared = bool(bo.get("shared", True))
    tcfg = ThompsonConfig(batch_size=int(bo.get("batch_size", 100)), candidates=int(bo.get("candidates", 1000)),
                          top_k=int(bo.get("top_k", 5)), ascent_steps=int(bo.get("ascent_steps", 50)),
                          steps=int(bo.get("steps", 10)), prior_feature_count=int(bo.get("prior_features", 1000)),
                          shared_pool=shared, shared_features=shared)
    solver = cfg.get("solver", {}).get("name", "sdd")
    n_init = int(bo.get("n_init", 1000))
    scfg = _optimiser(cfg, n_init, 0) if solver in ("sdd", "primal") else None
    trace = run_benchmark(spec, n_init, tcfg, solver, cfg["seed"], scfg,
                          noise_std=float(cfg.get("noise", {}).get("std", 0.0316)))
    trace.write_csv(out / "bayesopt_trace.csv")
    return {"best_true": trace.best_true, "best_observed": trace.best_observed, "queries": trace.queries,
            "_seconds": trace.seconds}


def _task_ct(cfg, root: RngStream, out: Path) -> Dict[str, Any]:
    from .ct import build_radon, fit_matern_prior, generate_phantom, greedy_design
    ct = cfg.get("ct", {})
    size = int(ct.get("size", 32))
    n_angles = int(ct.get("angles", 200))
    op = build_radon(size, size, None, np.arange(n_angles) * 180.0 / n_angles)
    n_pilot = int(ct.get("pilot", 5))
    pilot = [int(round(i * n_angles / n_pilot)) for i in range(n_pilot)]
    img = generate_phantom(root.child(0), size)
    clean = op.matrix @ img.ravel()
    sd = float(ct.get("noise_fraction", 0.05)) * float(np.mean(np.abs(clean)))
    gen = root.child(1).generator()
    y = np.concatenate([op.block([a]) @ img.ravel() + sd * gen.standard_normal(op.detector_pixels) for a in pilot])
    prior, ev = fit_matern_prior(op, pilot, y, 1.0 / sd ** 2, np.geomspace(0.5, 4 * size, 14),
                                 np.geomspace(0.01, 10, 13))
    total, m = int(ct.get("total", 15)), int(ct.get("samples", 500))
    res = greedy_design(op, pilot, prior, ct.get("criterion", "ese"), total, m, root.child(2), img, sd)
    rnd = greedy_design(op, pilot, prior, "ese", total, m, root.child(2), img, sd, selection="random")
    res.write_csv(out / "design_trace.csv")
    rnd.write_csv(out / "random_trace.csv")
    np.savetxt(out / "phantom.csv", img, delimiter=",")
    return {"lengthscale": prior.lengthscale, "variance": prior.variance, "pilot_log_evidence": ev,
            "psnr_design": res.psnr_trace, "psnr_random": rnd.psnr_trace,
            "angles": [float(op.angles[a]) for a in res.state.chosen]}


_RUNNERS = {"regression": _task_regression, "em": _task_em, "sampling-diagnostics": _task_diagnostics,
            "bayesopt": _task_bayesopt, "ct-design": _task_ct}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _run_one(cfg: Dict[str, Any], out: Path) -> Dict[str, Any]:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    t0 = time.perf_counter()
    result = _RUNNERS[cfg["task"]](cfg, RngStream(int(cfg["seed"])), out)
    timings = {"seconds": time.perf_counter() - t0}
    for k in [k for k in result if k.startswith("_")]:
        timings[k[1:]] = result.pop(k)
    summary = {"schema_version": SCHEMA_VERSION, "task": cfg["task"], "seed": cfg["seed"],
               "status": "ok", "metrics": _jsonable(result)}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(out / "timings.json", "w") as fh:
        json.dump(_jsonable(timings), fh, indent=2, sort_keys=True)
    return summary


def run_experiment(cfg: Dict[str, Any]) -> Path:
    """Run a validated config; multiple ``seeds`` go to ``out/seed-<s>`` subdirectories."""
    cfg = validate_config(copy.deepcopy(cfg))
    out = Path(cfg["out"])
    seeds = cfg.get("seeds")
    if not seeds:
        _run_one(cfg, out)
        return out
    threads = max(1, int(os.environ.get("GPSDD_THREADS", "1")))
    jobs = [(_merge(cfg, {"seed": int(s), "seeds": None}), out / f"seed-{int(s)}") for s in seeds]
    if threads == 1:
        for c, o in jobs:
            _run_one(c, o)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_run_one, *zip(*jobs)))
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="gpsdd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--task", choices=TASKS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.preset, args.task, args.seed, args.out)
        if args.config is None and args.preset is None and args.task is None:
            raise ConfigError("give --config, --preset or --task")
        out = run_experiment(cfg)
    except (ConfigError, DataError) as e:
        code = getattr(e, "code", "config_error")
        print(json.dumps({"status": "error", "code": code, "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any module failure as a structured error
        print(json.dumps({"status": "error", "code": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(str(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
