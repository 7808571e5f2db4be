import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpsdd.core import (DataError, Dataset, EmptyFileError, MissingFileError, NoiseModel, NonNumericCellError,
                        RngStream, SplitSpec, ZeroVarianceError, apply_standardization, as_generator, load_csv,
                        save_csv, split, standardize)


def test_rng_stream_reproducible_and_independent():
    a = RngStream(7, (1, 2)).generator().standard_normal(5)
    b = RngStream(7, (1, 2)).generator().standard_normal(5)
    c = RngStream(7, (1, 3)).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert RngStream(7).child(4).stream_id == (0, 4)


def test_as_generator_rejects_none():
    with pytest.raises(TypeError):
        as_generator(None)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), np.zeros(1))
    ds = Dataset(np.arange(3.0), np.arange(3.0))
    assert ds.inputs.shape == (3, 1)
    with pytest.raises(ValueError):
        ds.inputs[0, 0] = 1.0


def test_noise_model():
    assert NoiseModel.from_std(0.5).precision == pytest.approx(4.0)
    with pytest.raises(ValueError):
        NoiseModel(0.0)


def test_csv_roundtrip_exact(tmp_path):
    g = np.random.default_rng(0)
    ds = Dataset(g.standard_normal((20, 3)), g.standard_normal(20))
    p = tmp_path / "d.csv"
    save_csv(ds, p, "target")
    back = load_csv(p, "target")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)


def test_csv_target_column_anywhere(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y,b\n1,2,3\n4,5,6\n")
    ds = load_csv(p, "y")
    np.testing.assert_array_equal(ds.inputs, [[1, 3], [4, 6]])
    np.testing.assert_array_equal(ds.targets, [2, 5])


def test_csv_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_csv(tmp_path / "nope.csv", "y")
    p = tmp_path / "e.csv"
    p.write_text("x,y\n")
    with pytest.raises(EmptyFileError):
        load_csv(p, "y")
    p.write_text("x,y\n1,abc\n")
    with pytest.raises(NonNumericCellError) as e:
        load_csv(p, "y")
    assert e.value.code == "non_numeric_cell"


def test_standardize_rejects_constant():
    with pytest.raises(ZeroVarianceError):
        standardize(Dataset(np.ones((4, 1)), np.arange(4.0)))


@given(st.integers(3, 60), st.integers(1, 4), st.integers(0, 10**6))
def test_standardize_moments(n, d, seed):
    g = np.random.default_rng(seed)
    ds = Dataset(g.normal(3, 5, (n, d)), g.normal(-2, 7, n))
    s = standardize(ds)
    assert np.all(np.abs(s.inputs.mean(axis=0)) < 1e-12)
    assert np.allclose(s.inputs.std(axis=0), 1.0, atol=1e-12)
    assert abs(s.targets.mean()) < 1e-12
    np.testing.assert_allclose(s.unstandardize_targets(s.targets), ds.targets, rtol=1e-10, atol=1e-10)


def test_apply_standardization_uses_train_statistics():
    g = np.random.default_rng(1)
    ds = Dataset(g.standard_normal((50, 2)), g.standard_normal(50))
    tr, te = split(ds, SplitSpec(0.8, 3))
    s = standardize(tr)
    t = apply_standardization(te, s.standardization)
    np.testing.assert_allclose(t.inputs, (te.inputs - tr.inputs.mean(0)) / tr.inputs.std(0))


@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition(n, frac, seed):
    ds = Dataset(np.arange(n, dtype=float), np.arange(n, dtype=float))
    n_train = int(np.floor(frac * n))
    if n_train in (0, n):
        with pytest.raises(DataError):
            split(ds, SplitSpec(frac, seed))
        return
    tr, te = split(ds, SplitSpec(frac, seed))
    assert tr.n == n_train
    both = np.sort(np.concatenate([tr.targets, te.targets]))
    np.testing.assert_array_equal(both, ds.targets)
    tr2, _ = split(ds, SplitSpec(frac, seed))
    np.testing.assert_array_equal(tr.targets, tr2.targets)
