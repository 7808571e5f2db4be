"""Stochastic solvers for representer weights and pathwise posterior samples.

Two solvers share one loop structure (Nesterov momentum, iterate averaging):

* :func:`sdd_solve` runs stochastic dual descent on
  ``1/2 ||a||^2_{K + b^-1 I} - a^T z`` with random-coordinate gradients;
* :func:`primal_sgd_solve` runs minibatch SGD on
  ``1/2 ||z - K a||^2 + 1/(2b) ||a - shift||^2_K`` with a random-feature
  estimate of the regulariser gradient.

Targets may be a vector or an ``n x k`` block; block columns share the
sampled coordinates (and features) at each step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .core import Dataset, NoiseModel, RngLike, RngStream, as_generator
from .kernels import (FeatureMap, KernelSpec, feature_eval, feature_grad_weighted, gram, kernel_grad_weighted,
                      sample_features)
from .linalg import DENSE_CAP, LinearOperator, cg_solve, cho_solve, jittered_cholesky

log = logging.getLogger(__name__)

GEOMETRIC = "geometric"
ARITHMETIC = "arithmetic"
NO_AVERAGING = "none"
DIVERGENCE_NORM = 1e8


class DivergenceError(RuntimeError):
    pass


def kernel_operator(X, spec: KernelSpec, dense_cap: int = DENSE_CAP, block: int = 1024) -> LinearOperator:
    """``K_XX`` as a :class:`LinearOperator` with row access.

    Up to ``dense_cap`` points the Gram matrix is materialised once; above it
    rows and matvecs are recomputed blockwise on demand.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    n = X.shape[0]
    if n <= dense_cap:
        return LinearOperator.from_dense(gram(spec, X))

    def rows(idx):
        return gram(spec, X[np.asarray(idx)], X)

    def matvec(v):
        out = np.empty((n,) + v.shape[1:])
        for s in range(0, n, block):
            out[s:s + block] = gram(spec, X[s:s + block], X) @ v
        return out

    return LinearOperator((n, n), matvec, rows)


@dataclass
class OptimiserConfig:
    """Hyperparameters of one stochastic solve.

    ``step_size`` is the absolute per-step size; callers multiply their
    ``beta * n`` convention out themselves. ``chi`` defaults to ``100 / steps``
    (capped at 1). ``window`` is the arithmetic-averaging tail length
    (``None`` averages all iterates).
    """

    step_size: float
    steps: int
    momentum: float = 0.9
    averaging: str = GEOMETRIC
    chi: Optional[float] = None
    window: Optional[int] = None
    batch_size: int = 512
    rng: RngLike = 0
    trace_every: Optional[int] = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.averaging not in (GEOMETRIC, ARITHMETIC, NO_AVERAGING):
            raise ValueError(f"unknown averaging mode {self.averaging!r}")
        if self.chi is not None and not 0 < self.chi <= 1:
            raise ValueError("chi must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    @property
    def averaging_weight(self) -> float:
        if self.chi is not None:
            return self.chi
        return min(1.0, 100.0 / max(self.steps, 1))

    @property
    def interval(self) -> int:
        return self.trace_every or max(self.steps // 200, 1)


@dataclass
class SolverRun:
    weights: np.ndarray
    last: np.ndarray
    trace: List[Dict[str, float]] = field(default_factory=list)
    steps: int = 0

    def write_trace(self, path) -> None:
        keys = ["step"] + sorted({k for row in self.trace for k in row} - {"step"})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in self.trace:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def oracle_monitor(K: np.ndarray, alpha_star: np.ndarray, test_kernel: Optional[np.ndarray] = None,
                   test_targets: Optional[np.ndarray] = None) -> Callable[[np.ndarray], Dict[str, float]]:
    """Diagnostics callback: K-norm and K^2-norm errors, plus test RMSE when given."""

    def monitor(alpha):
        d = alpha - alpha_star
        Kd = K @ d
        out = {"k_norm_error": float(np.sqrt(max(np.sum(d * Kd), 0.0))),
               "k2_norm_error": float(np.linalg.norm(Kd))}
        if test_kernel is not None:
            out["rmse"] = float(np.sqrt(np.mean((test_kernel @ alpha - test_targets) ** 2)))
        return out

    return monitor


def _rows(op, idx):
    if isinstance(op, np.ndarray):
        return op[idx]
    if op.rows is None:
        raise ValueError("operator has no row access")
    return op.rows(idx)


def _matvec(op, v):
    return op @ v if isinstance(op, np.ndarray) else op.matvec(v)


def dual_gradient(alpha: np.ndarray, op, z: np.ndarray, b: float) -> np.ndarray:
    """Full dual gradient ``b^-1 a - z + K a``."""
    return alpha / b - z + _matvec(op, alpha)


def coordinate_gradient(alpha: np.ndarray, op, z: np.ndarray, b: float, idx) -> np.ndarray:
    """Random-coordinate estimate ``(n/r) sum_i ((K_i + e_i/b)^T a - z_i) e_i``.

    Repeated indices accumulate, matching sampling with replacement.
    """
    idx = np.atleast_1d(np.asarray(idx))
    n = alpha.shape[0]
    vals = _rows(op, idx) @ alpha + alpha[idx] / b - z[idx]
    g = np.zeros_like(alpha, dtype=float)
    np.add.at(g, idx, (n / idx.size) * vals)
    return g


def primal_gradient(alpha: np.ndarray, op, z: np.ndarray, b: float, shift=None) -> np.ndarray:
    """Full gradient ``K (K a - z) + b^-1 K (a - shift)``."""
    reg = alpha if shift is None else alpha - shift
    return _matvec(op, _matvec(op, alpha) - z + reg / b)


def primal_gradient_estimate(alpha: np.ndarray, op, z: np.ndarray, b: float, idx,
                             features: np.ndarray, shift=None) -> np.ndarray:
    """Unbiased estimate of :func:`primal_gradient`.

    The fit term uses the minibatch ``idx`` (with replacement); the regulariser
    ``K (a - shift)`` uses ``Phi Phi^T (a - shift)`` with ``features = Phi``.
    """
    idx = np.atleast_1d(np.asarray(idx))
    n = alpha.shape[0]
    Kb = _rows(op, idx)
    resid = Kb @ alpha - z[idx]
    fit = (n / idx.size) * (Kb.T @ resid)
    reg = alpha if shift is None else alpha - shift
    return fit + features @ (features.T @ reg) / b


def _averager(cfg: OptimiserConfig, alpha0: np.ndarray):
    chi = cfg.averaging_weight
    state = {"avg": alpha0.copy(), "count": 0}
    window: List[np.ndarray] = []

    def update(alpha):
        if cfg.averaging == GEOMETRIC:
            state["avg"] = chi * alpha + (1.0 - chi) * state["avg"]
        elif cfg.averaging == ARITHMETIC:
            if cfg.window is None:
                state["count"] += 1
                state["avg"] = state["avg"] + (alpha - state["avg"]) / state["count"]
            else:
                window.append(alpha.copy())
                if len(window) > cfg.window:
                    window.pop(0)
                state["avg"] = np.mean(window, axis=0)
        else:
            state["avg"] = alpha
        return state["avg"]

    return update


def _run(grad_fn, n_shape, cfg: OptimiserConfig, alpha0, monitor, gen) -> SolverRun:
    alpha = np.zeros(n_shape) if alpha0 is None else np.array(alpha0, dtype=float).reshape(n_shape)
    v = np.zeros_like(alpha)
    average = _averager(cfg, alpha)
    avg = alpha.copy()
    trace = []
    rho, beta = cfg.momentum, cfg.step_size
    for t in range(1, cfg.steps + 1):
        g = grad_fn(alpha + rho * v, gen)
        v = rho * v - beta * g
        alpha = alpha + v
        avg = average(alpha)
        if not np.all(np.isfinite(alpha)) or np.linalg.norm(alpha) > DIVERGENCE_NORM:
            raise DivergenceError(f"iterates diverged at step {t} (|alpha| > {DIVERGENCE_NORM:.0e}); "
                                  f"try a smaller step size than {beta:.3g}")
        if monitor is not None and (t % cfg.interval == 0 or t == cfg.steps):
            trace.append({"step": t, **monitor(avg)})
    return SolverRun(avg.copy(), alpha, trace, cfg.steps)


def sdd_solve(op, z: np.ndarray, b: float, cfg: OptimiserConfig, alpha0: Optional[np.ndarray] = None,
              monitor: Optional[Callable] = None) -> SolverRun:
    """Stochastic dual descent for ``(K + b^-1 I) a = z``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("targets must be finite")
    n = z.shape[0]
    r = min(cfg.batch_size, n)
    gen = as_generator(cfg.rng)

    def grad(point, g):
        return coordinate_gradient(point, op, z, b, g.integers(0, n, size=r))

    return _run(grad, z.shape, cfg, alpha0, monitor, gen)


def primal_sgd_solve(op, z: np.ndarray, b: float, cfg: OptimiserConfig, X, spec: KernelSpec,
                     reg_features: int = 100, shift: Optional[np.ndarray] = None,
                     alpha0: Optional[np.ndarray] = None, monitor: Optional[Callable] = None) -> SolverRun:
    """Minibatch SGD on the primal representer-weight objective.

    A fresh ``reg_features``-feature map is drawn at every step for the
    regulariser estimate; ``shift`` moves the regulariser centre (used by
    the reduced-variance sample objective).
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("targets must be finite")
    X = np.asarray(X, dtype=float)
    n = z.shape[0]
    r = min(cfg.batch_size, n)
    gen = as_generator(cfg.rng)

    def grad(point, g):
        idx = g.integers(0, n, size=r)
        fm = sample_features(spec, reg_features, g)
        return primal_gradient_estimate(point, op, z, b, idx, feature_eval(fm, X), shift)

    return _run(grad, z.shape, cfg, alpha0, monitor, gen)


@dataclass(frozen=True)
class PathwiseSample:
    """Posterior function ``x -> f~(x) + K_xX (alpha_mean - alpha_unc)``."""

    feature_map: FeatureMap
    prior_weights: np.ndarray
    alpha_unc: np.ndarray
    alpha_mean: np.ndarray
    inputs: np.ndarray
    spec: KernelSpec

    def prior(self, x) -> np.ndarray:
        return feature_eval(self.feature_map, x) @ self.prior_weights

    def __call__(self, x) -> np.ndarray:
        return evaluate_sample(self, x)

    def gradient(self, x) -> np.ndarray:
        """Gradient of the sample at the rows of ``x``; shape ``(npts, d')``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.inputs.shape[1])
        g = feature_grad_weighted(self.feature_map, x, self.prior_weights)
        return g + kernel_grad_weighted(self.spec, x, self.inputs, self.alpha_mean - self.alpha_unc)


def evaluate_mean(alpha_mean: np.ndarray, X_train, spec: KernelSpec, x) -> np.ndarray:
    return gram(spec, x, X_train) @ alpha_mean


def evaluate_sample(s: PathwiseSample, x) -> np.ndarray:
    return s.prior(x) + gram(s.spec, x, s.inputs) @ (s.alpha_mean - s.alpha_unc)


def _sample_streams(rng: RngLike, k: int) -> List[RngStream]:
    if isinstance(rng, RngStream):
        return [rng.child(i) for i in range(k)]
    seed = int(as_generator(rng).integers(0, 2**63 - 1))
    return [RngStream(seed, (i,)) for i in range(k)]


SOLVERS = ("sdd", "primal", "cg", "exact")


def solve_representer(op, z: np.ndarray, noise: NoiseModel, solver: str, cfg: Optional[OptimiserConfig] = None,
                      X=None, spec: Optional[KernelSpec] = None, shift=None, alpha0=None,
                      cg_tol: float = 1e-2, cg_max_iter: int = 1000, reg_features: int = 100,
                      max_halvings: int = 3) -> np.ndarray:
    """Solve ``(K + b^-1 I) a = z + shift / b`` (columnwise) with the chosen solver.

    For the primal solver the shift enters the regulariser; the other solvers
    fold it into the right-hand side, which has the same minimiser. The
    stochastic solvers halve their step size and restart on divergence, at
    most ``max_halvings`` times.
    """
    b = noise.precision
    rhs = z if shift is None else z + shift / b
    if solver in ("sdd", "primal"):
        for attempt in range(max_halvings + 1):
            try:
                if solver == "primal":
                    return primal_sgd_solve(op, z, b, cfg, X, spec, reg_features, shift, alpha0).weights
                return sdd_solve(op, rhs, b, cfg, alpha0).weights
            except DivergenceError:
                if attempt == max_halvings:
                    raise
                log.warning("%s solver diverged at step size %.3g; retrying with half", solver, cfg.step_size)
                cfg = replace(cfg, step_size=cfg.step_size / 2)
    if solver == "cg":
        return cg_solve(op.shifted(1.0 / b), rhs, tol=cg_tol, max_iter=cg_max_iter, x0=alpha0).x
    if solver == "exact":
        K = op.dense() if isinstance(op, LinearOperator) else np.asarray(op)
        L, _ = jittered_cholesky(K + np.eye(K.shape[0]) / b)
        return cho_solve(L, rhs)
    raise ValueError(f"unknown solver {solver!r}; choose one of {SOLVERS}")


def draw_posterior_samples(ds: Dataset, spec: KernelSpec, noise: NoiseModel, k: int, rng: RngLike,
                           prior_feature_count: int = 2000, cfg: Optional[OptimiserConfig] = None,
                           solver: str = "sdd", alpha_mean: Optional[np.ndarray] = None, op=None,
                           joint: bool = True, reg_features: int = 100, cg_tol: float = 1e-2,
                           shared_features: bool = False) -> List[PathwiseSample]:
    """Pathwise posterior samples with stochastically solved uncertainty terms.

    Sample ``j`` draws its prior features, prior weights and noise from its own
    stream. The SDD, CG and exact paths solve ``(K + b^-1 I) a = f~(X) + eps``;
    the primal path uses the reduced-variance form with targets ``f~(X)`` and
    regulariser centre ``b eps``. With ``joint`` all ``k`` systems are solved
    as one block (shared coordinate batches), otherwise one at a time.
    ``shared_features`` draws a single frequency/phase set for the whole batch
    (independent weights and noise per sample): each sample keeps its marginal
    law but samples become dependent through the shared basis.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose one of {SOLVERS}")
    if solver in ("sdd", "primal") and cfg is None:
        raise ValueError(f"solver {solver!r} needs an OptimiserConfig")
    X = ds.inputs
    n = ds.n
    op = kernel_operator(X, spec) if op is None else op
    streams = _sample_streams(rng, k)
    b = noise.precision

    fms, ws, eps = [], [], np.empty((n, k))
    shared = sample_features(spec, prior_feature_count, streams[0].child(2)) if shared_features else None
    for j, st in enumerate(streams):
        g = st.generator()
        fm = shared if shared_features else sample_features(spec, prior_feature_count, g)
        fms.append(fm)
        ws.append(g.standard_normal(prior_feature_count))
        eps[:, j] = g.standard_normal(n) / np.sqrt(b)
    if shared_features:
        prior_vals = feature_eval(shared, X) @ np.stack(ws, axis=1)
    else:
        prior_vals = np.stack([feature_eval(fm, X) @ w for fm, w in zip(fms, ws)], axis=1)

    if alpha_mean is None:
        alpha_mean = solve_representer(op, ds.targets, noise, solver, cfg, X, spec, cg_tol=cg_tol,
                                       reg_features=reg_features)

    def solve(cols, c):
        z = prior_vals[:, cols]
        if solver == "primal":
            return solve_representer(op, z, noise, solver, c, X, spec, shift=b * eps[:, cols],
                                     reg_features=reg_features)
        return solve_representer(op, z + eps[:, cols], noise, solver, c, X, spec, cg_tol=cg_tol)

    if joint:
        c = None if cfg is None else _with_rng(cfg, streams[0].child(1))
        try:
            A = solve(slice(None), c)
        except (DivergenceError, RuntimeError) as e:
            raise type(e)(f"joint sample solve failed: {e}") from e
    else:
        A = np.empty((n, k))
        for j in range(k):
            c = None if cfg is None else _with_rng(cfg, streams[j].child(1))
            try:
                A[:, j] = solve([j], c)[:, 0]
            except (DivergenceError, RuntimeError) as e:
                raise type(e)(f"sample {j}: {e}") from e

    return [PathwiseSample(fms[j], ws[j], A[:, j].copy(), alpha_mean, X, spec) for j in range(k)]


def _with_rng(cfg: OptimiserConfig, rng: RngLike) -> OptimiserConfig:
    return replace(cfg, rng=rng)


@dataclass(frozen=True)
class VarianceProbe:
    per_coordinate: np.ndarray
    trace: float
    mean: np.ndarray


def variance_probe(estimator: Callable[[np.ndarray, np.random.Generator], np.ndarray], alpha: np.ndarray,
                   n_draws: int, rng: RngLike) -> VarianceProbe:
    """Empirical per-coordinate variance of a stochastic gradient at fixed ``alpha``.

    ``estimator(alpha, generator)`` returns one gradient draw.
    """
    if n_draws < 2:
        raise ValueError("need at least two draws")
    gen = as_generator(rng)
    first = np.asarray(estimator(alpha, gen), dtype=float)
    mean = first.copy()
    m2 = np.zeros_like(first)
    for i in range(2, n_draws + 1):
        g = np.asarray(estimator(alpha, gen), dtype=float)
        delta = g - mean
        mean += delta / i
        m2 += delta * (g - mean)
    var = m2 / (n_draws - 1)
    return VarianceProbe(var, float(var.sum()), mean)
