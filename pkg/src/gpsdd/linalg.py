"""Matrix-free operators, (preconditioned) conjugate gradients and dense Cholesky oracles."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import lapack, qr, solve_triangular

from .core import RngLike, as_generator

log = logging.getLogger(__name__)

DENSE_CAP = 4000
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, message: Optional[str] = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot} failed)")


class DenseCapError(ValueError):
    pass


class CGError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearOperator:
    """A linear map given by its action on vectors (or column blocks).

    ``rows(idx)`` returns the requested rows as a dense ``len(idx) x cols``
    block and is only needed by coordinate-sampling solvers.
    """

    shape: tuple
    matvec: Callable[[np.ndarray], np.ndarray]
    rows: Optional[Callable[[np.ndarray], np.ndarray]] = None
    symmetric: bool = True
    array: Optional[np.ndarray] = field(default=None, repr=False)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.matvec(v)

    @classmethod
    def from_dense(cls, A: np.ndarray, symmetric: bool = True) -> "LinearOperator":
        A = np.asarray(A, dtype=float)
        return cls(A.shape, lambda v: A @ v, lambda idx: A[idx], symmetric, A)

    def shifted(self, shift: float) -> "LinearOperator":
        """``self + shift * I``."""
        base = self

        def mv(v):
            return base.matvec(v) + shift * v

        rows = None
        if base.rows is not None:
            def rows(idx):
                R = np.array(base.rows(idx), dtype=float, copy=True)
                R[np.arange(len(idx)), idx] += shift
                return R
        arr = None if base.array is None else base.array + shift * np.eye(self.shape[0])
        return LinearOperator(self.shape, mv, rows, self.symmetric, arr)

    def dense(self) -> np.ndarray:
        if self.array is not None:
            return self.array
        return self.matvec(np.eye(self.shape[1]))


def check_dense_cap(n: int, cap: int = DENSE_CAP) -> None:
    if n > cap:
        raise DenseCapError(f"dense path limited to {cap} rows, got {n}")


def cholesky(A: np.ndarray, cap: int = DENSE_CAP) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefiniteError` naming the pivot."""
    A = np.asarray(A, dtype=float)
    check_dense_cap(A.shape[0], cap)
    L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    return L


def jittered_cholesky(A: np.ndarray, ladder: Sequence[float] = JITTER_LADDER,
                      cap: int = DENSE_CAP) -> tuple:
    """Cholesky with an escalating diagonal jitter (relative to the mean diagonal).

    Returns ``(L, jitter)``.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    err = None
    for j in ladder:
        try:
            L = cholesky(A + (j * scale) * np.eye(A.shape[0]) if j else A, cap)
            if j:
                log.warning("Cholesky needed jitter %.1e", j)
            return L, j * scale
        except NotPositiveDefiniteError as e:
            err = e
    raise err


def cho_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    z = solve_triangular(L, rhs, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


def cholesky_solve(A: np.ndarray, rhs: np.ndarray, cap: int = DENSE_CAP) -> np.ndarray:
    return cho_solve(cholesky(A, cap), np.asarray(rhs, dtype=float))


def cholesky_logdet(A: np.ndarray, cap: int = DENSE_CAP) -> float:
    L = cholesky(A, cap)
    return float(2.0 * np.sum(np.log(np.diag(L))))


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: List[float]
    converged: bool
    iterates: Optional[List[np.ndarray]] = field(default=None, repr=False)

    def write_residuals(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "relative_residual"])
            for i, r in enumerate(self.residuals):
                w.writerow([i, repr(r)])


def cg_solve(op, rhs: np.ndarray, tol: float = 1e-2, max_iter: int = 1000,
             precond: Optional["Preconditioner"] = None, x0: Optional[np.ndarray] = None,
             store_iterates: bool = False) -> CGResult:
    """Solve ``op x = rhs`` for symmetric positive-definite ``op``.

    ``rhs`` may be a vector or an ``n x k`` block; columns are iterated
    jointly but with their own step sizes. Convergence is declared when every
    column satisfies ``||op x - rhs|| / ||rhs|| <= tol``. ``residuals`` records
    the worst column's relative residual per iteration. When the budget runs
    out, the iterate with the smallest worst-column residual is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    matvec = op.matvec if isinstance(op, LinearOperator) else (op if callable(op) else (lambda v: op @ v))
    b = np.asarray(rhs, dtype=float)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    bnorm = np.linalg.norm(B, axis=0)
    bnorm_safe = np.where(bnorm > 0, bnorm, 1.0)

    X = np.zeros_like(B) if x0 is None else np.array(np.asarray(x0, dtype=float).reshape(B.shape))
    R = B - matvec(X) if x0 is not None else B.copy()
    Z = precond.solve(R) if precond is not None else R
    P = Z.copy()
    rz = np.sum(R * Z, axis=0)

    rel = np.linalg.norm(R, axis=0) / bnorm_safe
    history = [float(rel.max())]
    best_X, best_res = X.copy(), history[0]
    iterates = [X[:, 0].copy() if vec else X.copy()] if store_iterates else None
    it = 0
    while history[-1] > tol and it < max_iter:
        AP = matvec(P)
        pAp = np.sum(P * AP, axis=0)
        active = rel > tol
        step = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        X = X + step * P
        R = R - step * AP
        if not np.all(np.isfinite(R)):
            raise CGError(f"non-finite residual at CG iteration {it + 1}; operator may not be SPD")
        Z = precond.solve(R) if precond is not None else R
        rz_new = np.sum(R * Z, axis=0)
        beta = np.where(active & (rz != 0), rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
        it += 1
        rel = np.linalg.norm(R, axis=0) / bnorm_safe
        history.append(float(rel.max()))
        if store_iterates:
            iterates.append(X[:, 0].copy() if vec else X.copy())
        if history[-1] < best_res:
            best_X, best_res = X.copy(), history[-1]
    converged = history[-1] <= tol
    out = X if converged else best_X
    return CGResult(out[:, 0] if vec else out, it, history, converged, iterates)


@dataclass(frozen=True)
class Preconditioner:
    """Low-rank-plus-noise approximation ``U diag(lam) U^T + b^-1 I`` with a Woodbury inverse."""

    U: np.ndarray
    eigenvalues: np.ndarray
    noise_precision: float

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        V = v[:, None] if v.ndim == 1 else v
        out = self.U @ (self.eigenvalues[:, None] * (self.U.T @ V)) + V / self.noise_precision
        return out[:, 0] if v.ndim == 1 else out

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Apply ``P^-1 = bI - b^2 U (b U^T U + diag(lam)^-1)^-1 U^T``."""
        b = self.noise_precision
        V = v[:, None] if v.ndim == 1 else v
        if self.rank == 0:
            out = b * V
        else:
            inner = b * (self.U.T @ self.U) + np.diag(1.0 / self.eigenvalues)
            out = b * V - b * b * (self.U @ np.linalg.solve(inner, self.U.T @ V))
        return out[:, 0] if v.ndim == 1 else out


def build_preconditioner(op, noise_precision: float, rank: int, rng: RngLike,
                         rank_tol: float = 1e-10) -> Preconditioner:
    """Randomised eigendecomposition of the PSD operator ``op`` (noise excluded).

    Gaussian test matrix, thin QR of ``op @ R``, Rayleigh-Ritz on the
    captured subspace. Directions beyond the numerical rank are dropped.
    """
    matvec = op.matvec if isinstance(op, LinearOperator) else op
    c = op.shape[0]
    if rank > c:
        raise ValueError(f"rank {rank} exceeds operator size {c}")
    gen = as_generator(rng)
    Rt = gen.standard_normal((c, rank))
    Y = matvec(Rt)
    Q, Rq, _ = qr(Y, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    if diag.size == 0 or diag[0] == 0:
        return Preconditioner(np.zeros((c, 0)), np.zeros(0), float(noise_precision))
    keep = int(np.sum(diag > rank_tol * diag[0]))
    Q = Q[:, :keep]
    Bm = Q.T @ matvec(Q)
    lam, V = np.linalg.eigh(0.5 * (Bm + Bm.T))
    pos = lam > rank_tol * max(lam.max(), 0.0)
    lam, V = lam[pos][::-1], V[:, pos][:, ::-1]
    return Preconditioner(Q @ V, lam, float(noise_precision))
