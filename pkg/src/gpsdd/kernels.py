"""Stationary kernels and random Fourier features.

The RBF kernel uses the convention ``k(x, x') = s2 * exp(-||(x - x') / psi||^2)``
(no factor of 2 in the denominator). Its spectral measure is therefore
``N(0, 2 psi^-2 I)``, not ``N(0, psi^-2 I)``.

Matérn kernels use the usual ``sqrt(2 nu) r / psi`` scaling, with the
Matérn-1/2 kernel reducing to ``s2 * exp(-r / psi)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .core import RngLike, as_generator

RBF = "rbf"
MATERN12 = "matern12"
MATERN32 = "matern32"
FAMILIES = (RBF, MATERN12, MATERN32)

_ALIASES = {
    "rbf": RBF, "se": RBF, "squaredexponential": RBF,
    "matern12": MATERN12, "exponential": MATERN12,
    "matern32": MATERN32,
}

_NU = {MATERN12: 0.5, MATERN32: 1.5}


class KernelError(ValueError):
    pass


def canonical_family(name: str) -> str:
    key = name.lower().replace("é", "e")
    for ch in "-_/ ":
        key = key.replace(ch, "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise KernelError(f"unsupported kernel family {name!r}; choose one of {FAMILIES}") from None


@dataclass(frozen=True)
class KernelSpec:
    family: str
    lengthscales: np.ndarray
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if ls.ndim != 1 or np.any(~np.isfinite(ls)) or np.any(ls <= 0):
            raise KernelError("lengthscales must be positive and finite")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise KernelError("kernel variance must be positive and finite")
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))

    @classmethod
    def isotropic(cls, family: str, lengthscale: float, dim: int, variance: float = 1.0) -> "KernelSpec":
        return cls(family, np.full(int(dim), float(lengthscale)), variance)

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def with_variance(self, variance: float) -> "KernelSpec":
        return KernelSpec(self.family, self.lengthscales, variance)


def _profile(family: str, r: np.ndarray) -> np.ndarray:
    if family == RBF:
        return np.exp(-r * r)
    if family == MATERN12:
        return np.exp(-r)
    a = np.sqrt(3.0) * r
    return (1.0 + a) * np.exp(-a)


def _as_points(spec: KernelSpec, x) -> np.ndarray:
    # 1-d arrays are a list of scalars for 1-d kernels and a single point otherwise
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if spec.dim == 1 else x.reshape(1, -1)
    if spec.dim > 1 and x.shape[1] != spec.dim:
        raise KernelError(f"input dimension {x.shape[1]} does not match kernel dimension {spec.dim}")
    return x


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or (spec.dim > 1 and x.shape[0] != spec.dim):
        raise KernelError(f"dimension mismatch: {x.shape} vs {x2.shape} for a {spec.dim}-d kernel")
    r = np.linalg.norm((x - x2) / spec.lengthscales)
    return float(spec.variance * _profile(spec.family, np.asarray(r)))


def gram(spec: KernelSpec, X, X2=None) -> np.ndarray:
    """Kernel matrix between the rows of ``X`` and ``X2`` (``X2 = X`` if omitted)."""
    a = _as_points(spec, X) / spec.lengthscales
    b = a if X2 is None else _as_points(spec, X2) / spec.lengthscales
    if spec.family == RBF:
        d2 = cdist(a, b, "sqeuclidean")
        return spec.variance * np.exp(-d2)
    r = cdist(a, b, "euclidean")
    return spec.variance * _profile(spec.family, r)


def gram_diag(spec: KernelSpec, X) -> np.ndarray:
    return np.full(_as_points(spec, X).shape[0], spec.variance)


def kernel_grad_x(spec: KernelSpec, x, x2) -> np.ndarray:
    """Gradient of ``k(x, x2)`` with respect to ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    return kernel_grad_rows(spec, x[None, :], x2[None, :])[0, 0]


def kernel_grad_rows(spec: KernelSpec, x: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Gradients of ``k(x_i, X2_j)`` w.r.t. ``x_i``; shape ``(len(x), len(X2), d)``."""
    x = _as_points(spec, x)
    X2 = _as_points(spec, X2)
    ls2 = spec.lengthscales ** 2
    diff = x[:, None, :] - X2[None, :, :]
    u = diff / spec.lengthscales
    if spec.family == RBF:
        k = spec.variance * np.exp(-np.sum(u * u, axis=-1))
        return -2.0 * k[..., None] * diff / ls2
    r = np.sqrt(np.sum(u * u, axis=-1))
    if spec.family == MATERN32:
        e = np.exp(-np.sqrt(3.0) * r)
        return -3.0 * spec.variance * e[..., None] * diff / ls2
    if np.any(r == 0):
        raise KernelError("the Matérn-1/2 kernel is not differentiable at coincident points")
    k = spec.variance * np.exp(-r)
    return -(k / r)[..., None] * diff / ls2


def kernel_grad_weighted(spec: KernelSpec, x: np.ndarray, X2: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_j c_ij k(x_i, X2_j)`` w.r.t. each ``x_i``; shape ``(len(x), d)``.

    ``coef`` is a ``len(X2)`` vector shared by all points or a
    ``len(x) x len(X2)`` matrix. Avoids the ``(len(x), len(X2), d)`` tensor.
    """
    x = _as_points(spec, x)
    X2 = _as_points(spec, X2)
    ls2 = spec.lengthscales ** 2
    a, b = x / spec.lengthscales, X2 / spec.lengthscales
    if spec.family == RBF:
        W = -2.0 * spec.variance * np.exp(-cdist(a, b, "sqeuclidean"))
    else:
        r = cdist(a, b, "euclidean")
        if spec.family == MATERN32:
            W = -3.0 * spec.variance * np.exp(-np.sqrt(3.0) * r)
        else:
            if np.any(r == 0):
                raise KernelError("the Matérn-1/2 kernel is not differentiable at coincident points")
            W = -spec.variance * np.exp(-r) / r
    W = W * coef
    return (x * W.sum(axis=1, keepdims=True) - W @ X2) / ls2


@dataclass(frozen=True)
class FeatureMap:
    """A sampled random Fourier feature expansion approximating a kernel.

    ``frequencies`` act on lengthscale-rescaled inputs. ``output_scaling``
    (if set) multiplies each feature coordinate after evaluation.
    """

    frequencies: np.ndarray
    phases: np.ndarray
    lengthscales: np.ndarray
    variance: float
    output_scaling: Optional[np.ndarray] = field(default=None)

    @property
    def num_features(self) -> int:
        return self.frequencies.shape[0]

    @property
    def scale(self) -> float:
        return float(np.sqrt(2.0 * self.variance / self.num_features))

    def with_scaling(self, scaling: Optional[np.ndarray]) -> "FeatureMap":
        return FeatureMap(self.frequencies, self.phases, self.lengthscales, self.variance,
                          None if scaling is None else np.asarray(scaling, dtype=float))

    def to_json(self) -> str:
        return json.dumps({
            "frequencies": self.frequencies.tolist(),
            "phases": self.phases.tolist(),
            "lengthscales": np.asarray(self.lengthscales).tolist(),
            "variance": self.variance,
            "output_scaling": None if self.output_scaling is None else self.output_scaling.tolist(),
        })

    @classmethod
    def from_json(cls, blob: str) -> "FeatureMap":
        d = json.loads(blob)
        sc = d.get("output_scaling")
        return cls(np.asarray(d["frequencies"], dtype=float), np.asarray(d["phases"], dtype=float),
                   np.asarray(d["lengthscales"], dtype=float), float(d["variance"]),
                   None if sc is None else np.asarray(sc, dtype=float))


def _spectral_draw(family: str, num: int, dim: int, gen: np.random.Generator) -> np.ndarray:
    z = gen.standard_normal((num, dim))
    if family == RBF:
        return np.sqrt(2.0) * z
    nu = _NU[family]
    # multivariate Student-t with 2 nu degrees of freedom
    chi = np.sqrt(gen.chisquare(2.0 * nu, size=(num, 1)))
    return np.sqrt(2.0 * nu) * z / chi


def sample_features(spec: KernelSpec, num_features: int, rng: RngLike) -> FeatureMap:
    if num_features < 1:
        raise KernelError("num_features must be at least 1")
    if spec.family not in FAMILIES:
        raise KernelError(f"unsupported kernel family {spec.family!r}")
    gen = as_generator(rng)
    freqs = _spectral_draw(spec.family, int(num_features), spec.dim, gen)
    phases = gen.uniform(0.0, 2.0 * np.pi, size=int(num_features))
    return FeatureMap(freqs, phases, spec.lengthscales, spec.variance)


def feature_eval(fm: FeatureMap, X) -> np.ndarray:
    """Evaluate features at the rows of ``X``; a single point gives a ``d``-vector."""
    X = np.asarray(X, dtype=float)
    d_in = fm.frequencies.shape[1]
    single = X.ndim == 0 or (X.ndim == 1 and d_in > 1)
    pts = X.reshape(1, -1) if single else (X.reshape(-1, 1) if X.ndim == 1 else X)
    phi = fm.scale * np.cos((pts / fm.lengthscales) @ fm.frequencies.T + fm.phases)
    if fm.output_scaling is not None:
        phi = phi * fm.output_scaling
    return phi[0] if single else phi


def feature_grad(fm: FeatureMap, x) -> np.ndarray:
    """Jacobian of the features at points ``x``: shape ``(npts, d_features, d_input)``."""
    x = np.asarray(x, dtype=float)
    d_in = fm.frequencies.shape[1]
    pts = x.reshape(-1, d_in) if x.ndim <= 1 else x
    arg = (pts / fm.lengthscales) @ fm.frequencies.T + fm.phases
    s = -fm.scale * np.sin(arg)
    if fm.output_scaling is not None:
        s = s * fm.output_scaling
    return s[:, :, None] * (fm.frequencies / fm.lengthscales)[None, :, :]


def feature_grad_weighted(fm: FeatureMap, x, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``phi(x) @ weights`` at the rows of ``x``; shape ``(npts, d_input)``."""
    x = np.asarray(x, dtype=float)
    d_in = fm.frequencies.shape[1]
    pts = x.reshape(-1, d_in) if x.ndim <= 1 else x
    s = -fm.scale * np.sin((pts / fm.lengthscales) @ fm.frequencies.T + fm.phases)
    w = np.asarray(weights, dtype=float)
    if fm.output_scaling is not None:
        w = w * fm.output_scaling
    return (s * w) @ (fm.frequencies / fm.lengthscales)


def prior_function(fm: FeatureMap, weights: np.ndarray):
    """Return the callable ``x -> phi(x) @ weights`` for a random-feature prior draw."""
    w = np.asarray(weights, dtype=float)

    def f(X):
        return feature_eval(fm, X) @ w

    return f
