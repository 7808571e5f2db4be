"""Inducing-point posterior means and samples with per-step cost independent of ``n``.

The optimal inducing weights minimise

    1/2 sum_i b (y_i - K_{x_i Z} a)^2 + 1/2 ||a||^2_{K_ZZ},

whose solution is ``(K_ZZ + b K_ZX K_XZ)^-1 b K_ZX y``. The dense formulas
double as the oracle for the stochastic solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree

from .core import Dataset, NoiseModel, RngLike, as_generator
from .kernels import FeatureMap, KernelSpec, feature_eval, gram, sample_features
from .linalg import cho_solve, jittered_cholesky
from .sgd import OptimiserConfig, SolverRun, _run

log = logging.getLogger(__name__)

KMEANS_ITERATIONS = 25


@dataclass(frozen=True)
class InducingSet:
    locations: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.locations, dtype=float)
        Z = Z[:, None] if Z.ndim == 1 else Z
        if Z.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if not np.all(np.isfinite(Z)):
            raise ValueError("inducing locations must be finite")
        if Z.shape[0] > 1:
            dist, _ = cKDTree(Z).query(Z, k=2)
            if np.any(dist[:, 1] <= 1e-12):
                raise ValueError("inducing locations contain duplicates")
        Z.setflags(write=False)
        object.__setattr__(self, "locations", Z)

    @property
    def m(self) -> int:
        return self.locations.shape[0]


def _kmeans(X: np.ndarray, m: int, gen: np.random.Generator) -> np.ndarray:
    uniq = np.unique(X, axis=0)
    if uniq.shape[0] < m:
        raise ValueError(f"only {uniq.shape[0]} distinct points for {m} centroids")
    C = uniq[gen.choice(uniq.shape[0], size=m, replace=False)].copy()
    for _ in range(KMEANS_ITERATIONS):
        _, lab = cKDTree(C).query(X)
        counts = np.bincount(lab, minlength=m)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
    return C


def _nn_elimination(X: np.ndarray, m: int) -> np.ndarray:
    n = X.shape[0]
    tree = cKDTree(X)
    alive = np.ones(n, dtype=bool)

    def nearest(i):
        k = 2
        while True:
            dist, idx = tree.query(X[i], k=min(k, n))
            for dd, j in zip(np.atleast_1d(dist), np.atleast_1d(idx)):
                if j != i and alive[j]:
                    return dd, j
            if k >= n:
                return np.inf, -1
            k *= 2

    nn_d = np.empty(n)
    nn_i = np.empty(n, dtype=int)
    for i in range(n):
        nn_d[i], nn_i[i] = nearest(i)
    for _ in range(n - m):
        # np.argmin picks the lowest index among ties
        p = int(np.argmin(np.where(alive, nn_d, np.inf)))
        alive[p] = False
        nn_d[p] = np.inf
        for q in np.flatnonzero(alive & (nn_i == p)):
            nn_d[q], nn_i[q] = nearest(q)
    return np.flatnonzero(alive)


def select_inducing(ds: Dataset, m: int, method: str = "kmeans", rng: RngLike = 0) -> InducingSet:
    """Choose ``m`` inducing locations by k-means centroids or nearest-neighbour elimination."""
    if m > ds.n:
        raise ValueError(f"m = {m} exceeds the number of data points {ds.n}")
    if m < 1:
        raise ValueError("m must be at least 1")
    if method == "kmeans":
        return InducingSet(_kmeans(ds.inputs, m, as_generator(rng)))
    if method == "nn_elimination":
        return InducingSet(ds.inputs[_nn_elimination(ds.inputs, m)])
    raise ValueError(f"unknown selection method {method!r}")


def _locations(Z) -> np.ndarray:
    return Z.locations if isinstance(Z, InducingSet) else np.asarray(Z, dtype=float)


def _system(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel):
    """Return ``(Z, K_ZX, L_z, solve)`` where ``solve(R) = (K_ZZ + b K_ZX K_XZ)^-1 R``.

    The solve goes through the whitened form ``L_z^-T (I + b A A^T)^-1 L_z^-1``
    with ``A = L_z^-1 K_ZX``, which avoids squaring the condition number of ``K_ZZ``.
    """
    Z = _locations(Z)
    Kzz = gram(spec, Z)
    Kzx = gram(spec, Z, ds.inputs)
    Lz, _ = jittered_cholesky(Kzz)
    A = solve_triangular(Lz, Kzx, lower=True)
    LB, _ = jittered_cholesky(np.eye(Z.shape[0]) + noise.precision * A @ A.T)

    def solve(R):
        inner = cho_solve(LB, solve_triangular(Lz, R, lower=True))
        return solve_triangular(Lz.T, inner, lower=False)

    return Z, Kzx, Lz, solve


def inducing_weights_exact(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel, targets=None) -> np.ndarray:
    """``(K_ZZ + b K_ZX K_XZ)^-1 b K_ZX t`` with ``t`` the targets (default ``Y``)."""
    _, Kzx, _, solve = _system(ds, Z, spec, noise)
    t = ds.targets if targets is None else np.asarray(targets, dtype=float)
    return solve(noise.precision * Kzx @ t)


def titsias_moments_exact(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel, xs,
                          full_cov: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and (co)variance of the optimal variational posterior."""
    Z, Kzx, Lz, solve = _system(ds, Z, spec, noise)
    Kzs = gram(spec, Z, xs)
    mean = Kzs.T @ solve(noise.precision * Kzx @ ds.targets)
    if full_cov:
        cov = gram(spec, xs) - Kzs.T @ cho_solve(Lz, Kzs) + Kzs.T @ solve(Kzs)
        return mean, cov
    var = spec.variance - np.sum(Kzs * cho_solve(Lz, Kzs), axis=0) + np.sum(Kzs * solve(Kzs), axis=0)
    return mean, var


def inducing_pathwise_moments(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel, xs,
                              prior: str = "nystrom") -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form moments of pathwise inducing samples solved exactly.

    The sample is ``f~(.) + K_.Z W (Y - f~_data(X) - eps)`` with
    ``W = (K_ZZ + b K_ZX K_XZ)^-1 b K_ZX``. With ``prior='nystrom'`` the data
    term sees only the Nyström part of the prior draw (exact); with
    ``prior='full'`` it sees the full draw (the practical approximation).
    """
    Z, Kzx, Lz, solve = _system(ds, Z, spec, noise)
    X = ds.inputs
    b = noise.precision
    Kzs = gram(spec, Z, xs)
    C = Kzs.T @ solve(b * Kzx)                 # p x n
    mean = C @ ds.targets
    Kss = gram(spec, xs)
    if prior == "nystrom":
        Qsx = Kzs.T @ cho_solve(Lz, Kzx)
        Qxx = Kzx.T @ cho_solve(Lz, Kzx)
        cross, data_cov = Qsx, Qxx
    elif prior == "full":
        cross, data_cov = gram(spec, xs, X), gram(spec, X)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    cov = Kss - C @ cross.T - cross @ C.T + C @ (data_cov + np.eye(ds.n) / b) @ C.T
    return mean, cov


def _inducing_sgd(ds: Dataset, Z: np.ndarray, spec: KernelSpec, noise: NoiseModel, targets: np.ndarray,
                  cfg: OptimiserConfig, reg_features: int, alpha0) -> SolverRun:
    X = ds.inputs
    n, m = ds.n, Z.shape[0]
    b = noise.precision
    r = min(cfg.batch_size, n)

    def grad(alpha, g):
        idx = g.integers(0, n, size=r)
        Kbz = gram(spec, X[idx], Z)                     # r x m, independent of n
        fit = (n / r) * b * Kbz.T @ (Kbz @ alpha - targets[idx])
        Phi = feature_eval(sample_features(spec, reg_features, g), Z)
        return fit + Phi @ (Phi.T @ alpha)

    return _run(grad, (m,) + targets.shape[1:], cfg, alpha0, None, as_generator(cfg.rng))


def inducing_mean_sgd(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel, cfg: OptimiserConfig,
                      reg_features: int = 100, alpha0: Optional[np.ndarray] = None) -> np.ndarray:
    return _inducing_sgd(ds, _locations(Z), spec, noise, ds.targets, cfg, reg_features, alpha0).weights


@dataclass(frozen=True)
class InducingSample:
    """``x -> f~(x) + K_xZ (alpha_mean - alpha_unc)``."""

    feature_map: FeatureMap
    prior_weights: np.ndarray
    alpha_unc: np.ndarray
    alpha_mean: np.ndarray
    locations: np.ndarray
    spec: KernelSpec

    def __call__(self, x) -> np.ndarray:
        prior = feature_eval(self.feature_map, x) @ self.prior_weights
        return prior + gram(self.spec, x, self.locations) @ (self.alpha_mean - self.alpha_unc)


def inducing_sample_sgd(ds: Dataset, Z, spec: KernelSpec, noise: NoiseModel, alpha_mean: np.ndarray,
                        rng: RngLike, cfg: Optional[OptimiserConfig] = None, prior_feature_count: int = 2000,
                        reg_features: int = 100, exact: bool = False) -> InducingSample:
    """One pathwise inducing sample; the prior is a full-GP random-feature draw.

    The uncertainty weights are fitted to ``f~(X) + eps``. ``exact`` swaps the
    SGD solve for the dense solution.
    """
    Z = _locations(Z)
    gen = as_generator(rng)
    fm = sample_features(spec, prior_feature_count, gen)
    w = gen.standard_normal(prior_feature_count)
    targets = feature_eval(fm, ds.inputs) @ w + gen.standard_normal(ds.n) / np.sqrt(noise.precision)
    if exact:
        alpha = inducing_weights_exact(ds, Z, spec, noise, targets)
    else:
        if cfg is None:
            raise ValueError("an OptimiserConfig is required unless exact=True")
        alpha = _inducing_sgd(ds, Z, spec, noise, targets, cfg, reg_features, None).weights
    return InducingSample(fm, w, alpha, np.asarray(alpha_mean, dtype=float), Z, spec)
