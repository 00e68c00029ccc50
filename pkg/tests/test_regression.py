import numpy as np
import pytest

from fbsdelab.errors import DomainError, RegressionError
from fbsdelab.regression import RegressionBasis, fit, projector


def test_polynomial_fit_recovers_polynomial():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 1)) * 2 + 1
    y = 1 - 2 * x[:, 0] + 0.5 * x[:, 0] ** 3
    f = fit(RegressionBasis("poly", 4), x, y)
    xs = np.linspace(-3, 5, 11)[:, None]
    np.testing.assert_allclose(f.predict(xs), 1 - 2 * xs[:, 0] + 0.5 * xs[:, 0] ** 3, atol=1e-6)


def test_two_dimensional_fit_and_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4000, 2))
    y = x[:, 0] * x[:, 1] + x[:, 1] ** 2
    f = fit(RegressionBasis("poly", 2, dim=2), x, y)
    pts = np.array([[0.5, -1.0], [1.0, 2.0]])
    np.testing.assert_allclose(f.predict(pts), pts[:, 0] * pts[:, 1] + pts[:, 1] ** 2, atol=1e-8)
    np.testing.assert_allclose(f.gradient(pts), np.stack([pts[:, 1], pts[:, 0] + 2 * pts[:, 1]], 1), atol=1e-5)


def test_partition_means_and_multi_column():
    x = np.repeat(np.arange(4.0), 10)[:, None]
    y = np.stack([x[:, 0] ** 2, -x[:, 0]], axis=1)
    f = fit(RegressionBasis("partition", n_bins=4), x, y)
    out = f.predict(np.array([[0.0], [3.0], [1.0]]))
    np.testing.assert_allclose(out, [[0, 0], [9, -3], [1, -1]])


def test_constant_cloud_reduces_to_mean():
    x = np.full((100, 1), 2.0)
    y = np.arange(100.0)
    for b in (RegressionBasis("poly", 4), RegressionBasis("partition", n_bins=8)):
        assert fit(b, x, y).predict(np.array([[7.0]]))[0] == pytest.approx(49.5)


def test_projector_reuse_matches_fresh_fit():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3000, 1))
    proj = projector(RegressionBasis("poly", 5), x)
    for k in range(3):
        y = np.sin(x[:, 0] * (k + 1))
        f = proj.fit(y)
        np.testing.assert_array_equal(proj.predict(f), fit(RegressionBasis("poly", 5), x, y).predict(x))


def test_worker_count_does_not_change_coefficients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(70000, 1))
    y = np.cos(x[:, 0]) + rng.normal(size=70000)
    a = fit(RegressionBasis("poly", 6), x, y, workers=1).coef
    b = fit(RegressionBasis("poly", 6), x, y, workers=8).coef
    assert np.array_equal(a, b)


def test_errors():
    x = np.zeros((10, 1))
    with pytest.raises(RegressionError):
        fit(RegressionBasis(), np.full((10, 1), np.nan), np.zeros(10))
    with pytest.raises(RegressionError):
        fit(RegressionBasis(), x, np.full(10, np.inf))
    with pytest.raises(DomainError):
        fit(RegressionBasis(), x, np.zeros(9))
    with pytest.raises(DomainError):
        RegressionBasis("spline")


def test_default_basis_choice():
    assert RegressionBasis.default(1).family == "poly"
    assert RegressionBasis.default(2).degree == 4
    assert RegressionBasis.default(3).family == "partition"
