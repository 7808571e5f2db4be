"""Parallel-beam CT: Siddon Radon operator, Gaussian image priors and greedy angle design.

Geometry: an ``N x N`` image of unit pixels centred at the origin, row 0 at
the top. At angle ``theta`` the rays run along ``(-sin theta, cos theta)``
and are offset along ``(cos theta, sin theta)`` by the detector coordinate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.signal import fftconvolve
from scipy.spatial.distance import cdist

from .core import RngLike, as_generator
from .linalg import (LinearOperator, build_preconditioner, cg_solve, cho_solve, cholesky_logdet,
                     jittered_cholesky)

log = logging.getLogger(__name__)

DENSE_PRIOR_CAP = 4096
ORIENTATION_SD_DEG = 2.86


# ---------------------------------------------------------------- Radon operator

def _siddon_ray(p0: np.ndarray, d: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel indices and intersection lengths of the line ``p0 + s d`` with the image."""
    half = n / 2.0
    lo, hi = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if not -half <= p0[k] <= half:
                return np.empty(0, dtype=int), np.empty(0)
        else:
            s1, s2 = (-half - p0[k]) / d[k], (half - p0[k]) / d[k]
            lo, hi = max(lo, min(s1, s2)), min(hi, max(s1, s2))
    if hi - lo <= 1e-12:
        return np.empty(0, dtype=int), np.empty(0)
    params = [np.array([lo, hi])]
    planes = np.arange(n + 1) - half
    for k in range(2):
        if abs(d[k]) >= 1e-15:
            s = (planes - p0[k]) / d[k]
            params.append(s[(s > lo) & (s < hi)])
    s = np.unique(np.concatenate(params))
    seg = np.diff(s)
    keep = seg > 1e-12
    mid = 0.5 * (s[1:] + s[:-1])[keep]
    x = p0[0] + mid * d[0]
    y = p0[1] + mid * d[1]
    col = np.clip(np.floor(x + half).astype(int), 0, n - 1)
    row = np.clip(np.floor(half - y).astype(int), 0, n - 1)
    return row * n + col, seg[keep]


@dataclass(frozen=True)
class RadonOperator:
    """Stacked sparse projection rows; angle ``a`` owns rows ``a*d_p : (a+1)*d_p``."""

    size: int
    detector_pixels: int
    angles: np.ndarray
    matrix: sparse.csr_matrix
    detector_width: float

    @property
    def num_pixels(self) -> int:
        return self.size * self.size

    def rows_for(self, angle_indices: Sequence[int]) -> np.ndarray:
        idx = np.asarray(angle_indices, dtype=int)
        return (idx[:, None] * self.detector_pixels + np.arange(self.detector_pixels)).reshape(-1)

    def block(self, angle_indices: Sequence[int]) -> sparse.csr_matrix:
        return self.matrix[self.rows_for(angle_indices)]

    def apply(self, image: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(image, dtype=float).reshape(self.num_pixels, -1).squeeze()

    def adjoint(self, sinogram: np.ndarray) -> np.ndarray:
        return self.matrix.T @ sinogram

    def chord_lengths(self) -> np.ndarray:
        """Geometric length of each ray inside the image square."""
        out = np.zeros(self.matrix.shape[0])
        half = self.size / 2.0
        for a, theta in enumerate(np.deg2rad(self.angles)):
            d = np.array([-np.sin(theta), np.cos(theta)])
            nrm = np.array([np.cos(theta), np.sin(theta)])
            for j, t in enumerate(_detector_offsets(self.detector_pixels, self.detector_width)):
                p0 = t * nrm
                lo, hi = -np.inf, np.inf
                empty = False
                for k in range(2):
                    if abs(d[k]) < 1e-15:
                        empty |= not -half <= p0[k] <= half
                    else:
                        s1, s2 = (-half - p0[k]) / d[k], (half - p0[k]) / d[k]
                        lo, hi = max(lo, min(s1, s2)), min(hi, max(s1, s2))
                out[a * self.detector_pixels + j] = 0.0 if empty else max(hi - lo, 0.0)
        return out


def _detector_offsets(d_p: int, width: float) -> np.ndarray:
    return (np.arange(d_p) + 0.5 - d_p / 2.0) * (width / d_p)


def build_radon(h: int, w: int, d_p: Optional[int] = None, angles: Sequence[float] = (0.0,),
                detector_width: Optional[float] = None) -> RadonOperator:
    """Siddon ray tracing with one ray through the centre of each detector pixel.

    The detector spans the image diagonal by default, with unit-width pixels.
    """
    if h != w:
        raise ValueError("only square images are supported")
    n = int(h)
    width = float(np.ceil(n * np.sqrt(2.0))) if detector_width is None else float(detector_width)
    d_p = int(round(width)) if d_p is None else int(d_p)
    if d_p < 1:
        raise ValueError("need at least one detector pixel")
    angles = np.asarray(angles, dtype=float)
    if np.any((angles < 0) | (angles >= 180)):
        raise ValueError("angles must lie in [0, 180) degrees")
    offsets = _detector_offsets(d_p, width)
    rows, cols, vals = [], [], []
    for a, theta in enumerate(np.deg2rad(angles)):
        d = np.array([-np.sin(theta), np.cos(theta)])
        nrm = np.array([np.cos(theta), np.sin(theta)])
        for j, t in enumerate(offsets):
            idx, lens = _siddon_ray(t * nrm, d, n)
            rows.append(np.full(idx.size, a * d_p + j))
            cols.append(idx)
            vals.append(lens)
    mat = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(len(angles) * d_p, n * n))
    mat.sum_duplicates()
    return RadonOperator(n, d_p, angles, mat, width)


def simulate_measurements(op_rows, image: np.ndarray, noise_fraction: float, rng: RngLike,
                          reference_scale: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """``y = T x + eps`` with ``sd(eps) = noise_fraction * mean|T x|``.

    ``reference_scale`` overrides ``mean|T x|`` (e.g. to share one noise level
    across partial scans). Returns ``(y, noise_sd)``.
    """
    x = np.asarray(image, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("image must be finite")
    clean = op_rows @ x
    scale = float(np.mean(np.abs(clean))) if reference_scale is None else float(reference_scale)
    sd = noise_fraction * scale
    if sd == 0:
        return clean, 0.0
    return clean + sd * as_generator(rng).standard_normal(clean.shape), sd


# ---------------------------------------------------------------- priors

@dataclass(frozen=True)
class ImagePrior:
    """Zero-mean Gaussian image prior: ``isotropic`` (``K = s2 I``) or ``matern12`` on pixel centres."""

    kind: str
    size: int
    lengthscale: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "matern12"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ValueError("prior hyperparameters must be positive")

    @property
    def num_pixels(self) -> int:
        return self.size * self.size

    def scaled(self, c: float) -> "ImagePrior":
        return ImagePrior(self.kind, self.size, self.lengthscale, self.variance * c)

    def _offset_kernel(self) -> np.ndarray:
        n = self.size
        o = np.arange(-(n - 1), n)
        r = np.hypot(o[:, None], o[None, :])
        return self.variance * np.exp(-r / self.lengthscale)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """``K v`` for a vector or a ``d_x x k`` block, by FFT convolution for Matérn."""
        if self.kind == "isotropic":
            return self.variance * v
        V = v.reshape(self.num_pixels, -1)
        ker = self._offset_kernel()
        out = np.empty_like(V, dtype=float)
        for j in range(V.shape[1]):
            img = V[:, j].reshape(self.size, self.size)
            out[:, j] = fftconvolve(img, ker, mode="same").reshape(-1)
        return out.reshape(v.shape)

    def operator(self) -> LinearOperator:
        return LinearOperator((self.num_pixels, self.num_pixels), self.matvec)

    def dense(self) -> np.ndarray:
        if self.num_pixels > DENSE_PRIOR_CAP:
            raise ValueError(f"dense prior limited to {DENSE_PRIOR_CAP} pixels")
        if self.kind == "isotropic":
            return self.variance * np.eye(self.num_pixels)
        n = self.size
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(float)
        return self.variance * np.exp(-cdist(pts, pts) / self.lengthscale)

    def sampler(self):
        """Return ``draw(gen, m) -> d_x x m`` prior samples."""
        if self.kind == "isotropic":
            s = np.sqrt(self.variance)
            return lambda gen, m: s * gen.standard_normal((self.num_pixels, m))
        if self.num_pixels > DENSE_PRIOR_CAP:
            raise ValueError("Matérn prior sampling is only available up to "
                             f"{DENSE_PRIOR_CAP} pixels (dense Cholesky factor)")
        L, _ = jittered_cholesky(self.dense(), cap=DENSE_PRIOR_CAP)
        return lambda gen, m: L @ gen.standard_normal((self.num_pixels, m))


def fit_matern_prior(op: RadonOperator, pilot: Sequence[int], y: np.ndarray, noise_precision: float,
                     lengthscales: Sequence[float], variances: Sequence[float]) -> Tuple[ImagePrior, float]:
    """Grid-maximise the exact evidence of the pilot measurements over (lengthscale, variance).

    Returns the best prior and its log evidence.
    """
    T = op.block(pilot)
    best, best_ev = None, -np.inf
    n_obs = T.shape[0]
    for psi in lengthscales:
        unit = ImagePrior("matern12", op.size, psi, 1.0)
        KT = unit.matvec(T.T.toarray())
        G = np.asarray(T @ KT)
        G = 0.5 * (G + G.T)
        for s2 in variances:
            C = s2 * G + np.eye(n_obs) / noise_precision
            L, _ = jittered_cholesky(C, cap=max(n_obs, 1))
            z = np.linalg.solve(L, y)
            ev = -0.5 * n_obs * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * z @ z
            if ev > best_ev:
                best, best_ev = ImagePrior("matern12", op.size, psi, s2), ev
    return best, float(best_ev)


# ---------------------------------------------------------------- design state

@dataclass
class DesignState:
    op: RadonOperator
    prior: ImagePrior
    noise_precision: float
    chosen: List[int] = field(default_factory=list)
    measurements: np.ndarray = field(default_factory=lambda: np.empty(0))
    KT: np.ndarray = field(default=None, repr=False)
    Kyy: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.KT is None:
            self.KT = np.empty((self.prior.num_pixels, 0))
        if self.Kyy is None:
            self.Kyy = np.empty((0, 0))

    @property
    def remaining(self) -> List[int]:
        taken = set(self.chosen)
        return [a for a in range(len(self.op.angles)) if a not in taken]

    def add_angle(self, angle_index: int, measurement: np.ndarray) -> None:
        """Append one angle, extending ``K_yy`` blockwise."""
        if angle_index in self.chosen:
            raise ValueError(f"angle {angle_index} already chosen")
        Tb = self.op.block([angle_index])
        KTb = self.prior.matvec(Tb.T.toarray())
        cross = np.asarray(Tb @ self.KT)                       # d_p x c
        corner = np.asarray(Tb @ KTb)
        corner = 0.5 * (corner + corner.T)
        c = self.Kyy.shape[0]
        Kyy = np.empty((c + corner.shape[0],) * 2)
        Kyy[:c, :c] = self.Kyy
        Kyy[c:, :c] = cross
        Kyy[:c, c:] = cross.T
        Kyy[c:, c:] = corner
        self.Kyy = Kyy
        self.KT = np.hstack([self.KT, KTb])
        self.chosen.append(int(angle_index))
        self.measurements = np.concatenate([self.measurements, np.asarray(measurement, dtype=float)])

    def operator_rows(self) -> sparse.csr_matrix:
        return self.op.block(self.chosen)

    def audit(self) -> float:
        """Max deviation of the incrementally built ``K_yy`` from ``T K T^T``."""
        T = self.operator_rows()
        direct = np.asarray(T @ self.prior.matvec(T.T.toarray()))
        return float(np.max(np.abs(direct - self.Kyy))) if self.Kyy.size else 0.0

    def noisy_factor(self) -> np.ndarray:
        L, _ = jittered_cholesky(self.Kyy + np.eye(self.Kyy.shape[0]) / self.noise_precision,
                                 cap=max(self.Kyy.shape[0], 1))
        return L


def posterior_mean_image(state: DesignState, tol: float = 1e-8, max_iter: int = 2000,
                         precond_rank: int = 100, rng: RngLike = 0) -> np.ndarray:
    """``mu = K T^T (K_yy + b^-1 I)^-1 y`` with the solve done by preconditioned CG."""
    c = state.Kyy.shape[0]
    if c == 0 or not np.any(state.measurements):
        return np.zeros(state.prior.num_pixels)
    Kop = LinearOperator.from_dense(state.Kyy)
    P = build_preconditioner(Kop, state.noise_precision, min(precond_rank, c), rng)
    res = cg_solve(Kop.shifted(1.0 / state.noise_precision), state.measurements, tol=tol,
                   max_iter=max_iter, precond=P)
    if not res.converged:
        log.warning("CG did not converge for the posterior mean (residual %.2e)", res.residuals[-1])
    return state.KT @ res.x


def pseudo_measurement_samples(state: DesignState, angle_indices: Sequence[int], m: int, rng: RngLike,
                               sampler=None) -> np.ndarray:
    """Pathwise pseudo-measurements for the given angles; shape ``(len(angles) * d_p, m)``.

    ``T_bar (x_i - K T^T (K_yy + b^-1 I)^-1 (eps_i + T x_i))`` with ``x_i ~ N(0, K)``
    and ``eps_i ~ N(0, b^-1 I)``.
    """
    gen = as_generator(rng)
    draw = sampler or state.prior.sampler()
    x = draw(gen, m)
    c = state.Kyy.shape[0]
    if c:
        eps = gen.standard_normal((c, m)) / np.sqrt(state.noise_precision)
        rhs = eps + state.operator_rows() @ x
        x = x - state.KT @ cho_solve(state.noisy_factor(), rhs)
    return np.asarray(state.op.block(angle_indices) @ x)


def eig_score(samples: np.ndarray, noise_precision: float) -> float:
    """``logdet(b^-1 I + S)`` with ``S`` the empirical second moment of the samples (rows = detector)."""
    m = samples.shape[1]
    S = samples @ samples.T / m
    A = S + np.eye(S.shape[0]) / noise_precision
    L, _ = jittered_cholesky(A, cap=max(A.shape[0], 1))
    return float(2.0 * np.sum(np.log(np.diag(L))))


def ese_score(samples: np.ndarray) -> float:
    return float(np.sum(samples * samples) / samples.shape[1])


def exact_angle_scores(state: DesignState, angle_indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Dense EIG and ESE from the exact posterior covariance (small images only)."""
    K = state.prior.dense()
    if state.Kyy.shape[0]:
        Sigma = K - state.KT @ cho_solve(state.noisy_factor(), state.KT.T)
    else:
        Sigma = K
    eig, ese = [], []
    d_p = state.op.detector_pixels
    for a in angle_indices:
        Tb = state.op.block([a])
        C = np.asarray(Tb @ (Tb @ Sigma).T)
        C = 0.5 * (C + C.T)
        eig.append(cholesky_logdet(C + np.eye(d_p) / state.noise_precision, cap=d_p))
        ese.append(float(np.trace(C)))
    return np.array(eig), np.array(ese)


def score_angles(samples: np.ndarray, d_p: int, criterion: str, noise_precision: float) -> np.ndarray:
    blocks = samples.reshape(-1, d_p, samples.shape[1])
    if criterion == "ese":
        return np.einsum("adm,adm->a", blocks, blocks) / samples.shape[1]
    if criterion == "eig":
        return np.array([eig_score(B, noise_precision) for B in blocks])
    raise ValueError(f"unknown criterion {criterion!r}")


def psnr(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, with the peak taken as the range of ``truth``."""
    truth = np.asarray(truth, dtype=float).reshape(-1)
    mse = float(np.mean((np.asarray(reconstruction).reshape(-1) - truth) ** 2))
    peak = float(truth.max() - truth.min())
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


@dataclass
class DesignResult:
    state: DesignState
    psnr_trace: List[Tuple[int, float]]
    rows: List[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "angle", "score", "psnr"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def _measure(op: RadonOperator, image: np.ndarray, angle: int, noise_sd: float, gen) -> np.ndarray:
    clean = op.block([angle]) @ image.reshape(-1)
    return clean + noise_sd * gen.standard_normal(clean.shape) if noise_sd > 0 else clean


def greedy_design(op: RadonOperator, pilot: Sequence[int], prior: ImagePrior, criterion: str,
                  total_angles: int, m: int, rng: RngLike, image: np.ndarray, noise_sd: float,
                  noise_precision: Optional[float] = None, psnr_every: int = 5,
                  selection: str = "greedy") -> DesignResult:
    """Greedy (or ``selection='random'``) angle acquisition after a pilot scan.

    ``noise_sd`` is the simulated measurement noise; the model uses
    ``noise_precision`` (default ``noise_sd^-2``). Ties go to the lowest
    candidate index. PSNR of the posterior mean is recorded whenever the
    number of acquired angles is a multiple of ``psnr_every``.
    """
    gen = as_generator(rng)
    b = noise_precision if noise_precision is not None else 1.0 / noise_sd ** 2
    state = DesignState(op, prior, b)
    sampler = prior.sampler() if selection == "greedy" else None
    for a in pilot:
        state.add_angle(a, _measure(op, image, a, noise_sd, gen))
    rows, trace = [], []

    def record(score):
        k = len(state.chosen)
        p = float("nan")
        if k % psnr_every == 0:
            p = psnr(posterior_mean_image(state), image)
            trace.append((k, p))
        rows.append({"step": k, "angle": repr(float(op.angles[state.chosen[-1]])),
                     "score": repr(float(score)), "psnr": repr(p)})

    record(float("nan"))
    while len(state.chosen) < total_angles:
        remaining = state.remaining
        if selection == "random":
            pick, score = int(gen.choice(remaining)), float("nan")
        else:
            samples = pseudo_measurement_samples(state, remaining, m, gen, sampler)
            scores = score_angles(samples, op.detector_pixels, criterion, b)
            i = int(np.argmax(scores))                       # first maximum = lowest index
            pick, score = remaining[i], float(scores[i])
        state.add_angle(pick, _measure(op, image, pick, noise_sd, gen))
        record(score)
    return DesignResult(state, trace, rows)


# ---------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class RectangleSpec:
    centre: Tuple[float, float]
    half_widths: Tuple[float, float]
    angle_deg: float
    intensity: float


def phantom_parameters(rng: RngLike, count: int = 3) -> List[RectangleSpec]:
    """Rectangles in unit coordinates; each orientation is ``N(0, 2.86 deg)``."""
    gen = as_generator(rng)
    out = []
    for _ in range(count):
        centre = tuple(gen.uniform(0.3, 0.7, size=2))
        half = tuple(gen.uniform(0.12, 0.3, size=2))
        out.append(RectangleSpec(centre, half, float(gen.normal(0.0, ORIENTATION_SD_DEG)),
                                 float(gen.uniform(0.2, 1.0))))
    return out


def render_phantom(rects: Sequence[RectangleSpec], size: int = 128) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((size, size))
    for r in rects:
        t = np.deg2rad(r.angle_deg)
        dx, dy = xx - r.centre[0], yy - r.centre[1]
        u = np.cos(t) * dx + np.sin(t) * dy
        v = -np.sin(t) * dx + np.cos(t) * dy
        img += r.intensity * ((np.abs(u) <= r.half_widths[0]) & (np.abs(v) <= r.half_widths[1]))
    return img


def generate_phantom(rng: RngLike, size: int = 128) -> np.ndarray:
    """Three superimposed, nearly axis-aligned rectangles with additive intensity."""
    return render_phantom(phantom_parameters(rng), size)
