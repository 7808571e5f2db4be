"""Finite-feature Gaussian linear model: sample-then-optimise and MacKay EM.

The model is ``y = Phi w + e`` with ``w ~ N(0, a^-1 I)`` and ``e ~ N(0, b^-1 I)``.
``M = b Phi^T Phi`` and ``H = M + a I``. Posterior samples are drawn as
minimisers of the low-variance loss

    L'(w) = 1/2 ||Phi w||_B^2 + 1/2 ||w - w0'||_A^2,   w0' = w0 + A^-1 Phi^T B eps,

whose minimiser ``H^-1 (Phi^T B eps + A w0)`` is distributed as ``N(0, H^-1)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import RngLike, as_generator
from .linalg import cho_solve, jittered_cholesky
from .sgd import OptimiserConfig, _run

log = logging.getLogger(__name__)

A_MIN = 1e-8
A_MAX = 1e12
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureModel:
    """Design matrix ``Phi`` (g-prior scaling already applied), noise precision ``b``, prior precision ``a``."""

    features: np.ndarray
    noise_precision: float
    prior_precision: float = 1.0

    def __post_init__(self):
        Phi = np.asarray(self.features, dtype=float)
        if Phi.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if not (self.prior_precision > 0 and self.noise_precision > 0):
            raise ValueError("precisions must be positive")
        object.__setattr__(self, "features", Phi)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def with_precision(self, a: float) -> "FeatureModel":
        return replace(self, prior_precision=float(a))

    def curvature(self) -> np.ndarray:
        """``M = b Phi^T Phi``."""
        return self.noise_precision * self.features.T @ self.features

    def hessian(self) -> np.ndarray:
        return self.curvature() + self.prior_precision * np.eye(self.d)

    def posterior_covariance(self) -> np.ndarray:
        L, _ = jittered_cholesky(self.hessian())
        return cho_solve(L, np.eye(self.d))


def _floor(diag: np.ndarray, floor: float) -> np.ndarray:
    bad = diag <= floor
    if np.any(bad):
        log.warning("%d feature(s) have (near-)zero curvature; flooring at %.1e", int(bad.sum()), floor)
    return np.where(bad, floor, diag)


def gprior_scaling_exact(Phi: np.ndarray, b: float, floor: float = SCALE_FLOOR) -> np.ndarray:
    """``s_i = M_ii^{-1/2}`` so that the rescaled features have unit curvature diagonal."""
    diag = b * np.sum(np.asarray(Phi) ** 2, axis=0)
    return 1.0 / np.sqrt(_floor(diag, floor))


def gprior_scaling_stochastic(Phi: np.ndarray, b: float, k: int, rng: RngLike,
                              floor: float = SCALE_FLOOR) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Estimate ``diag(M)`` from ``k`` projections ``Phi^T B eps_j``, ``eps_j ~ N(0, B^-1)``.

    Returns ``(s, projections, eps)``; the ``d x k`` projections are kept so
    they can serve as regulariser data parts.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    gen = as_generator(rng)
    n = Phi.shape[0]
    eps = gen.standard_normal((n, k)) / np.sqrt(b)
    proj = b * (Phi.T @ eps)
    diag = np.mean(proj ** 2, axis=1)
    return 1.0 / np.sqrt(_floor(diag, floor)), proj, eps


@dataclass(frozen=True)
class RegulariserParts:
    """Frozen decomposition ``w0' = w0 + A^-1 Phi^T B eps`` for ``k`` samples (columns)."""

    prior: np.ndarray
    data: np.ndarray
    precision: float

    @property
    def centre(self) -> np.ndarray:
        return self.prior + self.data


def sample_objective_targets(model: FeatureModel, k: int, rng: RngLike,
                             eps: Optional[np.ndarray] = None) -> Tuple[RegulariserParts, np.ndarray]:
    """Draw ``w0 ~ N(0, a^-1 I)`` and ``eps ~ N(0, b^-1 I)`` for ``k`` samples.

    The standard normal behind ``w0`` is drawn first from ``rng``, then ``eps``
    (unless given), so the same stream gives the same parts at any ``a``.
    Returns ``(parts, eps)``.
    """
    gen = as_generator(rng)
    a, b = model.prior_precision, model.noise_precision
    z = gen.standard_normal((model.d, k))
    if eps is None:
        eps = gen.standard_normal((model.n, k)) / np.sqrt(b)
    data = b * (model.features.T @ eps) / a
    return RegulariserParts(z / np.sqrt(a), data, a), eps


def rescale_regulariser(parts: RegulariserParts, a_new: float) -> RegulariserParts:
    """Move the parts to precision ``a_new``: prior part scales as ``a^-1/2``, data part as ``a^-1``."""
    if a_new <= 0:
        raise ValueError("precision must be positive")
    ratio = parts.precision / a_new
    return RegulariserParts(parts.prior * np.sqrt(ratio), parts.data * ratio, float(a_new))


def sample_loss(model: FeatureModel, w: np.ndarray, eps: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Standard sample loss ``1/2 ||eps - Phi w||_B^2 + 1/2 ||w - w0||_A^2`` (per column)."""
    r = eps - model.features @ w
    return 0.5 * model.noise_precision * np.sum(r * r, axis=0) \
        + 0.5 * model.prior_precision * np.sum((w - w0) ** 2, axis=0)


def low_variance_loss(model: FeatureModel, w: np.ndarray, parts: RegulariserParts) -> np.ndarray:
    f = model.features @ w
    return 0.5 * model.noise_precision * np.sum(f * f, axis=0) \
        + 0.5 * model.prior_precision * np.sum((w - parts.centre) ** 2, axis=0)


def sample_loss_gradient(model: FeatureModel, w, eps, w0) -> np.ndarray:
    Phi, b, a = model.features, model.noise_precision, model.prior_precision
    return b * Phi.T @ (Phi @ w - eps) + a * (w - w0)


def low_variance_gradient(model: FeatureModel, w, parts: RegulariserParts) -> np.ndarray:
    Phi, b, a = model.features, model.noise_precision, model.prior_precision
    return b * Phi.T @ (Phi @ w) + a * (w - parts.centre)


def gradient_identity_check(model: FeatureModel, w: np.ndarray, eps: np.ndarray, parts: RegulariserParts) -> float:
    """Max deviation between the full-batch gradients of both sample losses at ``w``.

    ``parts`` must be built from the same ``eps`` and ``w0`` for the identity to hold.
    """
    return float(np.max(np.abs(sample_loss_gradient(model, w, eps, parts.prior)
                               - low_variance_gradient(model, w, parts))))


def single_point_gradients(model: FeatureModel, w: np.ndarray, j: int, eps_j: float,
                           parts: RegulariserParts) -> Tuple[np.ndarray, np.ndarray]:
    """One-datapoint estimates of both sample-loss gradients, ``(g_L, g_L')``."""
    Phi, b, a, n = model.features, model.noise_precision, model.prior_precision, model.n
    phi = Phi[j]
    fit = phi @ w
    g = n * b * phi * (fit - eps_j) + a * (w - parts.prior)
    g_prime = n * b * phi * fit + a * (w - parts.centre)
    return g, g_prime


def single_point_trace_variance(model: FeatureModel, w: np.ndarray, targets: np.ndarray) -> float:
    """Exact ``tr Var_j`` of ``n b phi_j (phi_j^T w - t_j)`` for ``j`` uniform over the data."""
    Phi, b, n = model.features, model.noise_precision, model.n
    r = Phi @ w - targets
    second = n * b * b * np.sum(np.sum(Phi * Phi, axis=1) * r * r)
    mean = b * Phi.T @ r
    return float(second - mean @ mean)


def _sgd_config(cfg: Optional[OptimiserConfig], model: FeatureModel) -> OptimiserConfig:
    if cfg is not None:
        return cfg
    # full-batch default: step below 1/lambda_max(H)
    lam = np.linalg.norm(model.features, 2) ** 2 * model.noise_precision + model.prior_precision
    return OptimiserConfig(step_size=0.5 / lam, steps=2000, batch_size=model.n)


def _minibatch_solver(model: FeatureModel, targets, centre, cfg: OptimiserConfig, warm):
    """SGD on ``1/2 ||t - Phi w||_B^2 + 1/2 ||w - centre||_A^2`` (columnwise)."""
    Phi, b, a, n = model.features, model.noise_precision, model.prior_precision, model.n
    r = min(cfg.batch_size, n)
    full = r >= n

    def grad(w, g):
        if full:
            return b * Phi.T @ (Phi @ w - targets) + a * (w - centre)
        idx = g.integers(0, n, size=r)
        P = Phi[idx]
        return (n / r) * b * P.T @ (P @ w - targets[idx]) + a * (w - centre)

    return _run(grad, warm.shape, cfg, warm, None, as_generator(cfg.rng)).weights


def solve_sample(model: FeatureModel, parts: RegulariserParts, warm: Optional[np.ndarray] = None,
                 cfg: Optional[OptimiserConfig] = None) -> np.ndarray:
    """Minimise the low-variance sample loss; one column per sample."""
    if not np.isclose(parts.precision, model.prior_precision, rtol=1e-12):
        raise ValueError("regulariser parts were built for a different prior precision")
    warm = parts.prior.copy() if warm is None else np.asarray(warm, dtype=float)
    zeros = np.zeros((model.n,) + parts.centre.shape[1:])
    return _minibatch_solver(model, zeros, parts.centre, _sgd_config(cfg, model), warm)


def solve_sample_exact(model: FeatureModel, parts: RegulariserParts) -> np.ndarray:
    L, _ = jittered_cholesky(model.hessian())
    return cho_solve(L, model.prior_precision * parts.centre)


def solve_mode(model: FeatureModel, Y: np.ndarray, warm: Optional[np.ndarray] = None,
               cfg: Optional[OptimiserConfig] = None) -> np.ndarray:
    """Minimise ``1/2 ||Y - Phi w||_B^2 + 1/2 ||w||_A^2``."""
    Y = np.asarray(Y, dtype=float)
    warm = np.zeros(model.d) if warm is None else np.asarray(warm, dtype=float)
    return _minibatch_solver(model, Y, 0.0, _sgd_config(cfg, model), warm)


def solve_mode_exact(model: FeatureModel, Y: np.ndarray) -> np.ndarray:
    L, _ = jittered_cholesky(model.hessian())
    return cho_solve(L, model.noise_precision * model.features.T @ np.asarray(Y, dtype=float))


def effective_dimension_sampled(samples: np.ndarray, Phi: np.ndarray, b: float) -> float:
    """``mean_j ||Phi zeta_j||_B^2`` for samples stored as columns."""
    f = Phi @ samples.reshape(samples.shape[0], -1)
    return float(b * np.mean(np.sum(f * f, axis=0)))


def effective_dimension_weightspace(samples: np.ndarray, a: float, d: Optional[int] = None) -> float:
    """``d - mean_j zeta_j^T A zeta_j``; can be negative for few samples."""
    Z = samples.reshape(samples.shape[0], -1)
    d = Z.shape[0] if d is None else d
    return float(d - a * np.mean(np.sum(Z * Z, axis=0)))


def mackay_update(gamma: float, w_mode: np.ndarray, a_min: float = A_MIN, a_max: float = A_MAX) -> float:
    """``a = gamma / ||w*||^2`` clamped to ``[a_min, a_max]``."""
    sq = float(np.sum(np.asarray(w_mode) ** 2))
    if sq == 0.0:
        log.warning("posterior mode is zero; clamping prior precision to %.1e", a_max)
        return a_max
    return float(np.clip(gamma / sq, a_min, a_max))


def mackay_update_layerwise(samples: np.ndarray, w_mode: np.ndarray, precisions: Sequence[float],
                            blocks: Sequence[slice], a_min: float = A_MIN, a_max: float = A_MAX) -> List[float]:
    """Per-block update ``a_l = (d_l - a_l mean ||zeta_l||^2) / ||w*_l||^2``.

    Uses the weight-space effective-dimension estimator restricted to each block.
    """
    out = []
    for a, blk in zip(precisions, blocks):
        Z = samples[blk]
        d_l = Z.shape[0]
        gamma_l = d_l - a * np.mean(np.sum(Z * Z, axis=0))
        out.append(mackay_update(max(gamma_l, 0.0), w_mode[blk], a_min, a_max))
    return out


@dataclass
class EMState:
    precision: float
    mode: np.ndarray
    samples: np.ndarray
    parts: RegulariserParts
    eps: np.ndarray
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = False

    def write_history(self, path) -> None:
        keys = ["step", "precision", "effective_dimension", "mode_sq_norm", "mean_sample_loss"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.history:
                w.writerow([row[k] if k == "step" else repr(float(row[k])) for k in keys])


def run_em(model: FeatureModel, Y: np.ndarray, k: int, max_steps: int, tol: float, rng: RngLike,
           cfg: Optional[OptimiserConfig] = None, exact: bool = False,
           estimator: str = "kernelised") -> EMState:
    """Sample-based EM for the prior precision with warm starts and frozen regulariser draws.

    Each step solves for the mode and ``k`` samples at the current precision,
    estimates the effective dimension from the samples and applies the MacKay
    update. ``exact`` replaces the inner SGD solves with Cholesky solves.
    """
    if estimator not in ("kernelised", "weightspace"):
        raise ValueError(f"unknown effective-dimension estimator {estimator!r}")
    gen = as_generator(rng)
    parts, eps = sample_objective_targets(model, k, gen)
    state = EMState(model.prior_precision, np.zeros(model.d), parts.prior.copy(), parts, eps)
    a = model.prior_precision
    for step in range(1, max_steps + 1):
        m = model.with_precision(a)
        step_cfg = None if cfg is None else replace(cfg, rng=gen)
        if exact:
            mode = solve_mode_exact(m, Y)
            samples = solve_sample_exact(m, parts)
        else:
            mode = solve_mode(m, Y, state.mode if step > 1 else None, step_cfg or _sgd_config(None, m))
            samples = solve_sample(m, parts, state.samples if step > 1 else None,
                                   step_cfg or _sgd_config(None, m))
        if estimator == "kernelised":
            gamma = effective_dimension_sampled(samples, m.features, m.noise_precision)
        else:
            gamma = effective_dimension_weightspace(samples, a)
        a_new = mackay_update(gamma, mode)
        state.history.append({"step": step, "precision": a_new, "effective_dimension": gamma,
                              "mode_sq_norm": float(mode @ mode),
                              "mean_sample_loss": float(np.mean(low_variance_loss(m, samples, parts)))})
        parts = rescale_regulariser(parts, a_new)
        state.mode, state.samples, state.parts, state.step = mode, samples, parts, step
        rel = abs(a_new - a) / a
        a = a_new
        state.precision = a
        if rel < tol:
            state.converged = True
            break
    return state


def predict_with_samples(mean: np.ndarray, features: np.ndarray, samples: np.ndarray,
                         statistic: str = "mean", q: float = 0.5) -> np.ndarray:
    """Statistic of ``{mean(x) + phi(x) zeta_j}`` over samples, at each row of ``features``."""
    vals = np.asarray(mean, dtype=float)[..., None] + np.atleast_2d(features) @ samples
    k = samples.shape[1]
    if statistic == "mean":
        return vals.mean(axis=1)
    if statistic == "variance":
        if k < 2:
            raise ValueError("variance needs at least two samples")
        return vals.var(axis=1, ddof=1)
    if statistic == "quantile":
        return np.quantile(vals, q, axis=1)
    raise ValueError(f"unknown statistic {statistic!r}")
