"""Parallel Thompson sampling on the unit box with pathwise posterior samples."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import Dataset, NoiseModel, RngLike, RngStream, as_generator
from .kernels import (FeatureMap, KernelSpec, feature_eval, feature_grad_weighted, gram, kernel_grad_weighted,
                      sample_features)
from .sgd import (OptimiserConfig, PathwiseSample, draw_posterior_samples, kernel_operator,
                  solve_representer)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThompsonConfig:
    """Acquisition settings. ``ascent_step_size=None`` means ``0.05 * min(lengthscales)``.

    ``shared_pool`` scores one candidate pool for every sample instead of a
    fresh pool per sample; ``shared_features`` gives the batch of samples a
    common random-feature basis. Both trade sample independence for speed.
    """

    batch_size: int = 100
    candidates: int = 1000
    top_k: int = 10
    ascent_steps: int = 100
    ascent_step_size: Optional[float] = None
    steps: int = 10
    prior_feature_count: int = 2000
    shared_pool: bool = False
    shared_features: bool = False

    def __post_init__(self):
        for name in ("batch_size", "candidates", "top_k", "prior_feature_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.ascent_steps < 0 or self.steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.top_k > self.candidates:
            raise ValueError("top_k cannot exceed the candidate pool")

    def step_size(self, spec: KernelSpec) -> float:
        return self.ascent_step_size if self.ascent_step_size is not None else 0.05 * float(spec.lengthscales.min())


def _shared_basis(samples: Sequence[PathwiseSample]) -> bool:
    fm = samples[0].feature_map
    return all(s.feature_map is fm for s in samples)


def _evaluate_many(samples: Sequence[PathwiseSample], x: np.ndarray) -> np.ndarray:
    """Values of sample ``j`` at the points ``x[j]`` (``x`` is ``(k, p, d)``) or at a shared ``(p, d)`` pool.

    Returns a ``k x p`` array.
    """
    base = samples[0]
    coef = np.stack([s.alpha_mean - s.alpha_unc for s in samples])          # k x n
    W = np.stack([s.prior_weights for s in samples])                        # k x F
    if x.ndim == 2:
        out = (gram(base.spec, x, base.inputs) @ coef.T).T
        if _shared_basis(samples):
            return out + (feature_eval(base.feature_map, x) @ W.T).T
        return out + np.stack([s.prior(x) for s in samples])
    k, p, d = x.shape
    flat = x.reshape(-1, d)
    out = np.einsum("kpn,kn->kp", gram(base.spec, flat, base.inputs).reshape(k, p, -1), coef)
    if _shared_basis(samples):
        Phi = feature_eval(base.feature_map, flat).reshape(k, p, -1)
        return out + np.einsum("kpf,kf->kp", Phi, W)
    return out + np.stack([s.prior(x[j]) for j, s in enumerate(samples)])


def _gradient_many(samples: Sequence[PathwiseSample], x: np.ndarray) -> np.ndarray:
    base = samples[0]
    coef = np.stack([s.alpha_mean - s.alpha_unc for s in samples])
    k, p, d = x.shape
    flat = x.reshape(-1, d)
    out = kernel_grad_weighted(base.spec, flat, base.inputs, np.repeat(coef, p, axis=0)).reshape(k, p, d)
    if _shared_basis(samples):
        W = np.repeat(np.stack([s.prior_weights for s in samples]), p, axis=0)
        return out + feature_grad_weighted(base.feature_map, flat, W).reshape(k, p, d)
    for j, s in enumerate(samples):
        out[j] += feature_grad_weighted(s.feature_map, x[j], s.prior_weights)
    return out


def maximise_samples(samples: Sequence[PathwiseSample], cfg: ThompsonConfig,
                     rng: RngLike) -> Tuple[np.ndarray, np.ndarray]:
    """Multistart gradient ascent on each sample over ``[0, 1]^d``.

    Returns ``(argmaxes, values)`` with shapes ``(k, d)`` and ``(k,)``.
    """
    gen = as_generator(rng)
    k = len(samples)
    d = samples[0].inputs.shape[1]
    eta = cfg.step_size(samples[0].spec)
    if cfg.shared_pool:
        pool = gen.uniform(size=(cfg.candidates, d))
        vals = _evaluate_many(samples, pool)
        cand = np.broadcast_to(pool, (k,) + pool.shape)
    else:
        cand = gen.uniform(size=(k, cfg.candidates, d))
        vals = _evaluate_many(samples, cand)
    top = np.argsort(-vals, axis=1, kind="stable")[:, :cfg.top_k]
    x = np.take_along_axis(cand, top[..., None], axis=1)
    for _ in range(cfg.ascent_steps):
        x = np.clip(x + eta * _gradient_many(samples, x), 0.0, 1.0)
    fx = _evaluate_many(samples, x)
    if not np.all(np.isfinite(fx)):
        raise FloatingPointError("non-finite sample value during ascent")
    # keep the better of the ascended point and its starting candidate
    start = np.take_along_axis(vals, top, axis=1)
    better = fx >= start
    x = np.where(better[..., None], x, np.take_along_axis(cand, top[..., None], axis=1))
    fx = np.where(better, fx, start)
    best = np.argmax(fx, axis=1)
    return x[np.arange(k), best], fx[np.arange(k), best]


def maximise_sample(s: PathwiseSample, cfg: ThompsonConfig, rng: RngLike) -> Tuple[np.ndarray, float]:
    x, v = maximise_samples([s], cfg, rng)
    return x[0], float(v[0])


@dataclass
class BayesOptState:
    data: Dataset
    spec: KernelSpec
    noise: NoiseModel
    solver: str = "sdd"
    solver_cfg: Optional[OptimiserConfig] = None
    alpha_mean: Optional[np.ndarray] = None
    true_values: Optional[np.ndarray] = None

    def refresh_mean(self, warm: Optional[np.ndarray] = None, rng: RngLike = 0) -> None:
        cfg = None if self.solver_cfg is None else replace(self.solver_cfg, rng=rng)
        op = kernel_operator(self.data.inputs, self.spec)
        self.alpha_mean = solve_representer(op, self.data.targets, self.noise, self.solver, cfg,
                                            self.data.inputs, self.spec, alpha0=warm)


@dataclass
class BayesOptTrace:
    best_observed: List[float] = field(default_factory=list)
    best_true: List[float] = field(default_factory=list)
    queries: List[int] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def record(self, state: BayesOptState, seconds: float) -> None:
        y = state.data.targets
        self.best_observed.append(float(y.max()))
        if state.true_values is not None:
            self.best_true.append(float(state.true_values.max()))
        self.queries.append(state.data.n)
        self.seconds.append(float(seconds))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "queries", "best_observed", "best_true", "seconds"])
            for i in range(len(self.queries)):
                bt = repr(self.best_true[i]) if self.best_true else ""
                w.writerow([i, self.queries[i], repr(self.best_observed[i]), bt, repr(self.seconds[i])])


def thompson_step(state: BayesOptState, oracle: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
                  cfg: ThompsonConfig, rng: RngStream) -> BayesOptState:
    """One parallel Thompson step.

    ``oracle(X)`` returns ``(noisy observations, noiseless values)``; the
    second element may be ``None`` when the true function is unknown.
    """
    if state.alpha_mean is None:
        state.refresh_mean(rng=rng.child(0))
    samples = draw_posterior_samples(state.data, state.spec, state.noise, cfg.batch_size, rng.child(1),
                                     prior_feature_count=cfg.prior_feature_count, cfg=state.solver_cfg,
                                     solver=state.solver, alpha_mean=state.alpha_mean,
                                     shared_features=cfg.shared_features)
    X_new, _ = maximise_samples(samples, cfg, rng.child(2))
    try:
        y_new, f_new = oracle(X_new)
    except Exception as e:
        raise RuntimeError(f"oracle failed on a batch of {len(X_new)} queries: {e}") from e
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    data = Dataset(np.vstack([state.data.inputs, X_new]), np.concatenate([state.data.targets, y_new]))
    true = None
    if state.true_values is not None and f_new is not None:
        true = np.concatenate([state.true_values, np.asarray(f_new, dtype=float).reshape(-1)])
    warm = np.concatenate([state.alpha_mean, np.zeros(len(y_new))])
    new = replace(state, data=data, alpha_mean=None, true_values=true)
    new.refresh_mean(warm=warm, rng=rng.child(3))
    return new


@dataclass(frozen=True)
class FeatureTarget:
    """Ground-truth objective ``x -> phi(x) w`` drawn from a random-feature prior."""

    feature_map: FeatureMap
    weights: np.ndarray
    noise_std: float

    def __call__(self, X, gen: Optional[np.random.Generator] = None):
        f = feature_eval(self.feature_map, np.atleast_2d(X)) @ self.weights
        if gen is None or self.noise_std == 0:
            return f, f
        return f + self.noise_std * gen.standard_normal(f.shape), f


def make_target(spec: KernelSpec, num_features: int, noise_std: float, rng: RngLike) -> FeatureTarget:
    gen = as_generator(rng)
    fm = sample_features(spec, num_features, gen)
    return FeatureTarget(fm, gen.standard_normal(num_features), float(noise_std))


def run_benchmark(spec: KernelSpec, n_init: int, cfg: ThompsonConfig, solver: str, seed: int,
                  solver_cfg: Optional[OptimiserConfig] = None, noise_std: float = 1e-3 ** 0.5,
                  target_features: int = 5000, target: Optional[FeatureTarget] = None) -> BayesOptTrace:
    """Thompson sampling on a random-feature target over ``[0, 1]^d``.

    The target, initial design and all acquisition randomness derive from
    ``seed``; the solver consumes its own child streams so that different
    solvers share the target and initial data.
    """
    root = RngStream(seed)
    target = target or make_target(spec, target_features, noise_std, root.child(0))
    gen_obs = root.child(1).generator()
    X0 = gen_obs.uniform(size=(n_init, spec.dim))
    y0, f0 = target(X0, gen_obs)
    noise = NoiseModel(1.0 / max(target.noise_std, 1e-6) ** 2)
    state = BayesOptState(Dataset(X0, y0), spec, noise, solver, solver_cfg, true_values=f0)
    trace = BayesOptTrace()
    trace.record(state, 0.0)
    for t in range(cfg.steps):
        t0 = time.perf_counter()
        state = thompson_step(state, lambda X: target(X, gen_obs), cfg, root.child(2, t))
        trace.record(state, time.perf_counter() - t0)
    return trace
