"""Datasets, noise model, RNG streams and train/test splitting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np


class DataError(ValueError):
    """Base class for dataset ingestion errors. ``code`` identifies the failure."""

    code = "data_error"


class MissingFileError(DataError):
    code = "missing_file"


class NonNumericCellError(DataError):
    code = "non_numeric_cell"


class EmptyFileError(DataError):
    code = "empty_file"


class ZeroVarianceError(DataError):
    code = "zero_variance"


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Every call to :meth:`generator` returns a fresh generator positioned at the
    start of the stream, so the same pair always reproduces the same draws.
    Independent streams are obtained with :meth:`child`.
    """

    seed: int
    stream_id: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if isinstance(self.stream_id, int):
            object.__setattr__(self, "stream_id", (int(self.stream_id),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.stream_id)
        return np.random.default_rng(ss)

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))


RngLike = Union[RngStream, np.random.Generator, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Normalise the accepted RNG arguments to a numpy ``Generator``.

    ``None`` is rejected: every stochastic call must be explicitly seeded.
    """
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError("an explicit RngStream, Generator or integer seed is required")


@dataclass(frozen=True)
class Standardization:
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: float
    target_scale: float


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    standardization: Optional[Standardization] = None
    columns: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if x.shape[0] < 1:
            raise DataError("dataset must contain at least one row")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"inputs have {x.shape[0]} rows but targets have {y.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("dataset entries must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[index], self.targets[index], self.standardization, self.columns)

    def unstandardize_targets(self, values: np.ndarray) -> np.ndarray:
        st = self.standardization
        if st is None:
            return np.asarray(values)
        return np.asarray(values) * st.target_scale + st.target_mean


@dataclass(frozen=True)
class NoiseModel:
    """Homoscedastic Gaussian observation noise with precision ``b``."""

    precision: float

    def __post_init__(self):
        b = float(self.precision)
        if not (np.isfinite(b) and b > 0):
            raise ValueError(f"noise precision must be positive and finite, got {self.precision}")
        object.__setattr__(self, "precision", b)

    @property
    def variance(self) -> float:
        return 1.0 / self.precision

    @classmethod
    def from_std(cls, std: float) -> "NoiseModel":
        return cls(1.0 / float(std) ** 2)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0


def load_csv(path: Union[str, os.PathLike], target_column: str) -> Dataset:
    """Read a numeric CSV with a single header row.

    Every column other than ``target_column`` becomes an input feature, in
    file order. Row order is preserved.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise EmptyFileError(f"{path} has no data rows")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise DataError(f"target column {target_column!r} not in header {header}")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"row {i + 2} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCellError(f"row {i + 2}, column {header[j]!r}: {cell!r}") from None
            if not np.isfinite(v):
                raise NonNumericCellError(f"row {i + 2}, column {header[j]!r}: {cell!r}")
            values[i, j] = v
    t = header.index(target_column)
    feature_cols = [j for j in range(len(header)) if j != t]
    return Dataset(values[:, feature_cols], values[:, t],
                   columns=tuple(header[j] for j in feature_cols))


def save_csv(ds: Dataset, path: Union[str, os.PathLike], target_column: str = "y",
             columns: Optional[Sequence[str]] = None) -> None:
    cols = list(columns or ds.columns or [f"x{j}" for j in range(ds.dim)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [target_column])
        for x, y in zip(ds.inputs, ds.targets):
            # repr round-trips float64 exactly
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def standardize(ds: Dataset) -> Dataset:
    """Shift and scale every input column and the targets to zero mean, unit std."""
    if ds.n < 2:
        raise DataError("standardization needs at least two rows")
    x, y = ds.inputs, ds.targets
    mu_x, sd_x = x.mean(axis=0), x.std(axis=0)
    mu_y, sd_y = float(y.mean()), float(y.std())
    if np.any(sd_x <= 0) or sd_y <= 0:
        raise ZeroVarianceError("cannot standardize a constant column")
    xs = (x - mu_x) / sd_x
    ys = (y - mu_y) / sd_y
    # a second centring pass removes the rounding left by the first
    xs = xs - xs.mean(axis=0)
    ys = ys - ys.mean()
    return Dataset(xs, ys, Standardization(mu_x, sd_x, mu_y, sd_y), ds.columns)


def apply_standardization(ds: Dataset, st: Standardization) -> Dataset:
    """Transform ``ds`` with statistics computed elsewhere (e.g. a train split)."""
    return Dataset((ds.inputs - st.input_mean) / st.input_scale,
                   (ds.targets - st.target_mean) / st.target_scale, st, ds.columns)


def split(ds: Dataset, spec: SplitSpec = SplitSpec(), rng: RngLike = None) -> Tuple[Dataset, Dataset]:
    """Shuffle rows and cut at ``floor(train_fraction * n)``.

    When ``rng`` is omitted the permutation is seeded from ``spec.seed``.
    """
    if ds.n < 2:
        raise DataError("split needs at least two rows")
    if not 0 < spec.train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    gen = as_generator(RngStream(spec.seed) if rng is None else rng)
    perm = gen.permutation(ds.n)
    n_train = int(np.floor(spec.train_fraction * ds.n))
    if n_train == 0 or n_train == ds.n:
        raise DataError(f"train fraction {spec.train_fraction} leaves an empty split of {ds.n} rows")
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))
