"""Dense cubic-cost Gaussian process oracle.

Everything here is ground truth for the stochastic solvers: posterior moments,
the log evidence, the effective dimension and the spectral basis used to
diagnose where iterative solvers have (not) converged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .core import Dataset, NoiseModel
from .kernels import KernelSpec, gram
from .linalg import DENSE_CAP, cho_solve, check_dense_cap, jittered_cholesky

log = logging.getLogger(__name__)

NULL_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class ExactPosterior:
    inputs: np.ndarray
    spec: KernelSpec
    noise: NoiseModel
    alpha: np.ndarray
    chol: np.ndarray

    def mean(self, X) -> np.ndarray:
        return gram(self.spec, X, self.inputs) @ self.alpha

    def covariance(self, X, X2=None) -> np.ndarray:
        X2 = X if X2 is None else X2
        A = solve_triangular(self.chol, gram(self.spec, self.inputs, X), lower=True)
        B = A if X2 is X else solve_triangular(self.chol, gram(self.spec, self.inputs, X2), lower=True)
        return gram(self.spec, X, X2) - A.T @ B

    def variance(self, X) -> np.ndarray:
        A = solve_triangular(self.chol, gram(self.spec, self.inputs, X), lower=True)
        return np.maximum(self.spec.variance - np.sum(A * A, axis=0), 0.0)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``(K + b^-1 I)^-1`` using the stored factor."""
        return cho_solve(self.chol, rhs)


def noisy_gram_factor(X, spec: KernelSpec, noise: NoiseModel, cap: int = DENSE_CAP):
    X = np.asarray(X, dtype=float)
    check_dense_cap(X.shape[0] if X.ndim > 1 else X.size, cap)
    K = gram(spec, X)
    K[np.diag_indices_from(K)] += noise.variance
    L, _ = jittered_cholesky(K, cap=cap)
    return K, L


def fit_exact(ds: Dataset, spec: KernelSpec, noise: NoiseModel, cap: int = DENSE_CAP) -> ExactPosterior:
    _, L = noisy_gram_factor(ds.inputs, spec, noise, cap)
    alpha = cho_solve(L, ds.targets)
    return ExactPosterior(ds.inputs, spec, noise, alpha, L)


def evidence(ds: Dataset, spec: KernelSpec, noise: NoiseModel, cap: int = DENSE_CAP) -> float:
    """Log marginal likelihood ``log N(y; 0, K + b^-1 I)``."""
    _, L = noisy_gram_factor(ds.inputs, spec, noise, cap)
    z = solve_triangular(L, ds.targets, lower=True)
    n = ds.n
    return float(-0.5 * n * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * z @ z)


def linear_model_evidence(Phi: np.ndarray, y: np.ndarray, prior_precision: float,
                          noise_precision: float) -> float:
    """Evidence of ``y = Phi w + e`` with ``w ~ N(0, a^-1 I)``, ``e ~ N(0, b^-1 I)``.

    Evaluated through the ``d x d`` Hessian so that it is cheap when ``d < n``.
    """
    n, d = Phi.shape
    a, b = prior_precision, noise_precision
    H = b * Phi.T @ Phi + a * np.eye(d)
    L = np.linalg.cholesky(H)
    w = cho_solve(L, b * Phi.T @ y)
    resid = y - Phi @ w
    logdet_cov = 2 * np.sum(np.log(np.diag(L))) - d * np.log(a) - n * np.log(b)
    quad = b * resid @ resid + a * w @ w
    return float(-0.5 * (n * np.log(2 * np.pi) + logdet_cov + quad))


def effective_dimension_forms(Phi: np.ndarray, prior_precision: float,
                              noise_precision: float) -> Tuple[float, float, float]:
    """The three equivalent forms ``tr(M H^-1)``, ``d - tr(A H^-1)``, ``tr(K (K + B^-1)^-1)``."""
    n, d = Phi.shape
    a, b = prior_precision, noise_precision
    M = b * Phi.T @ Phi
    H = M + a * np.eye(d)
    Hinv = np.linalg.inv(H)
    first = float(np.trace(M @ Hinv))
    second = float(d - a * np.trace(Hinv))
    K = Phi @ Phi.T / a
    third = float(np.trace(np.linalg.solve(K + np.eye(n) / b, K)))
    return first, second, third


def effective_dimension_exact(ds: Dataset = None, spec: KernelSpec = None, noise: NoiseModel = None,
                              prior_precision: float = 1.0, features: Optional[np.ndarray] = None) -> float:
    """Effective dimension from explicit features (weight-space) or a kernel.

    With ``features`` the weight-space problem ``A = aI`` is used; otherwise the
    kernel form ``tr(K (K + b^-1 I)^-1)`` with ``K`` scaled by ``1/a``.
    """
    if features is not None:
        return effective_dimension_forms(features, prior_precision, noise.precision)[0]
    K = gram(spec, ds.inputs) / prior_precision
    lam = np.clip(np.linalg.eigvalsh(K), 0.0, None)
    return float(np.sum(lam / (lam + noise.variance)))


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def coefficients(self) -> np.ndarray:
        """Representer weights of each basis function, ``V[:, i] / sqrt(lambda_i)``."""
        lam = np.where(self.eigenvalues > NULL_EIGENVALUE, self.eigenvalues, np.inf)
        return self.eigenvectors / np.sqrt(lam)

    def is_null(self, i: int) -> bool:
        return bool(self.eigenvalues[i] <= NULL_EIGENVALUE)


def spectral_basis(ds: Dataset, spec: KernelSpec, cap: int = DENSE_CAP) -> SpectralBasis:
    check_dense_cap(ds.n, cap)
    lam, V = np.linalg.eigh(gram(spec, ds.inputs))
    order = np.argsort(lam)[::-1]
    return SpectralBasis(np.clip(lam[order], 0.0, None), V[:, order])


def project_error(basis: SpectralBasis, i: int, alpha: np.ndarray, alpha_star: np.ndarray) -> float:
    """RKHS norm of the projection of ``f - f*`` onto the ``i``-th spectral basis function."""
    if basis.is_null(i):
        log.warning("spectral direction %d is numerically null (eigenvalue %.2e)", i, basis.eigenvalues[i])
    return float(abs(np.sqrt(basis.eigenvalues[i]) * basis.eigenvectors[:, i] @ (alpha - alpha_star)))


def rkhs_norm(alpha: np.ndarray, K: np.ndarray) -> float:
    return float(np.sqrt(max(alpha @ K @ alpha, 0.0)))


def k2_norm(alpha: np.ndarray, K: np.ndarray) -> float:
    return float(np.linalg.norm(K @ alpha))
