import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpsdd.kernels import (FeatureMap, KernelError, KernelSpec, canonical_family, feature_eval, feature_grad,
                           feature_grad_weighted, gram, gram_diag, kernel_eval, kernel_grad_rows,
                           kernel_grad_weighted, kernel_grad_x, prior_function, sample_features)

FAMS = ["rbf", "matern12", "matern32"]


def test_closed_forms():
    x, y = np.array([0.3, -0.1]), np.array([1.0, 0.5])
    ls = np.array([0.7, 1.3])
    r = np.linalg.norm((x - y) / ls)
    assert kernel_eval(KernelSpec("rbf", ls, 2.0), x, y) == pytest.approx(2.0 * np.exp(-r ** 2))
    assert kernel_eval(KernelSpec("matern12", ls, 2.0), x, y) == pytest.approx(2.0 * np.exp(-r))
    s3 = np.sqrt(3) * r
    assert kernel_eval(KernelSpec("matern32", ls, 2.0), x, y) == pytest.approx(2.0 * (1 + s3) * np.exp(-s3))


def test_aliases_and_validation():
    assert canonical_family("Matern-3/2") == canonical_family("matern32")
    with pytest.raises((KernelError, ValueError)):
        canonical_family("cosine")
    with pytest.raises(KernelError):
        KernelSpec("rbf", np.array([-1.0]))


@pytest.mark.parametrize("fam", FAMS)
@given(n=st.integers(1, 30), d=st.integers(1, 3), seed=st.integers(0, 10**6))
def test_gram_symmetric_psd(fam, n, d, seed):
    g = np.random.default_rng(seed)
    spec = KernelSpec(fam, g.uniform(0.2, 2, d), float(g.uniform(0.5, 2)))
    X = g.standard_normal((n, d))
    K = gram(spec, X)
    np.testing.assert_allclose(K, K.T, atol=1e-14)
    assert np.linalg.eigvalsh(K).min() > -1e-10 * n
    np.testing.assert_allclose(np.diag(K), gram_diag(spec, X))


@pytest.mark.parametrize("fam", FAMS)
def test_gradients_match_finite_differences(fam):
    g = np.random.default_rng(0)
    spec = KernelSpec(fam, np.array([0.8, 1.4]), 1.5)
    x, X2 = g.standard_normal(2), g.standard_normal((6, 2))
    h = 1e-6
    fd = np.array([[(kernel_eval(spec, x + h * e, y) - kernel_eval(spec, x - h * e, y)) / (2 * h)
                    for e in np.eye(2)] for y in X2])
    np.testing.assert_allclose(np.squeeze(kernel_grad_rows(spec, x, X2)), fd, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(np.squeeze(kernel_grad_x(spec, x, X2[0])), fd[0], rtol=1e-5, atol=1e-8)
    coef = g.standard_normal(6)
    w = kernel_grad_weighted(spec, x[None], X2, coef[None])
    np.testing.assert_allclose(w[0], coef @ fd, rtol=1e-5, atol=1e-8)


def test_matern12_gradient_at_coincident_point_raises():
    spec = KernelSpec("matern12", np.array([1.0]), 1.0)
    with pytest.raises(KernelError):
        kernel_grad_weighted(spec, np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)))


@pytest.mark.parametrize("fam", FAMS)
def test_random_features_approximate_kernel(fam):
    spec = KernelSpec(fam, np.array([0.6, 1.1]), 1.7)
    X = np.random.default_rng(1).standard_normal((15, 2))
    Phi = feature_eval(sample_features(spec, 200000, 3), X)
    # Monte Carlo error scales like sigma^2 sqrt(2 / F); allow about five standard errors
    assert np.abs(Phi @ Phi.T - gram(spec, X)).max() < 5 * 1.7 * np.sqrt(2 / 200000) * 1.5


def test_rbf_frequency_covariance():
    spec = KernelSpec("rbf", np.array([0.5]), 1.0)
    fm = sample_features(spec, 200000, 0)
    w = fm.frequencies[:, 0] / fm.lengthscales[0]
    assert np.var(w) == pytest.approx(2.0 / 0.5 ** 2, rel=0.02)


def test_feature_gradients():
    spec = KernelSpec("matern32", np.array([0.7, 1.2]), 1.0)
    fm = sample_features(spec, 50, 1).with_scaling(np.linspace(0.5, 1.5, 50))
    x = np.array([[0.2, -0.4], [1.0, 0.3]])
    h = 1e-6
    J = feature_grad(fm, x)
    for k, e in enumerate(np.eye(2)):
        fd = (feature_eval(fm, x + h * e) - feature_eval(fm, x - h * e)) / (2 * h)
        np.testing.assert_allclose(J[:, :, k], fd, rtol=1e-5, atol=1e-8)
    w = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_allclose(feature_grad_weighted(fm, x, w), np.einsum("pfd,f->pd", J, w), atol=1e-12)
    f = prior_function(fm, w)
    np.testing.assert_allclose(f(x), feature_eval(fm, x) @ w)


def test_feature_map_json_roundtrip():
    fm = sample_features(KernelSpec("rbf", np.array([0.3, 2.0]), 0.9), 17, 5).with_scaling(np.arange(1.0, 18.0))
    back = FeatureMap.from_json(fm.to_json())
    X = np.random.default_rng(0).standard_normal((4, 2))
    np.testing.assert_array_equal(feature_eval(back, X), feature_eval(fm, X))


def test_sample_features_reproducible():
    spec = KernelSpec("matern12", np.array([1.0]), 1.0)
    a, b = sample_features(spec, 10, 4), sample_features(spec, 10, 4)
    np.testing.assert_array_equal(a.frequencies, b.frequencies)
    with pytest.raises(KernelError):
        sample_features(spec, 0, 4)
