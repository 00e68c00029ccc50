import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdelab.errors import DomainError
from fbsdelab.grid import make_grid, path_increments, sample_ensemble


@pytest.mark.parametrize("t0,T,n,expected", [
    (0, 1, 4, [0, 0.25, 0.5, 0.75, 1]),
    (0, 1, 1, [0, 1]),
    (0.5, 1.5, 2, [0.5, 1.0, 1.5]),
])
def test_grid_points(t0, T, n, expected):
    g = make_grid(t0, T, n)
    np.testing.assert_allclose(g.times, expected, rtol=0, atol=1e-15)
    assert g.times[-1] == T


def test_single_step_dt():
    assert make_grid(0, 1, 1).dt == 1.0


@pytest.mark.parametrize("t0,T,n", [(1, 1, 4), (2, 1, 4), (0, 1, 0), (0, 1, 2.5)])
def test_grid_rejects(t0, T, n):
    with pytest.raises(DomainError):
        make_grid(t0, T, n)


@given(t0=st.floats(-10, 10), span=st.floats(1e-3, 10), n=st.integers(1, 500))
@settings(max_examples=50, deadline=None)
def test_grid_strictly_increasing_and_exact_end(t0, span, n):
    g = make_grid(t0, t0 + span, n)
    assert np.all(np.diff(g.times) > 0)
    assert g.times[-1] == t0 + span
    assert g.times[0] == t0


def test_same_seed_bit_identical():
    g = make_grid(0, 1, 20)
    a = sample_ensemble(g, 500, 2, 42).increments
    b = sample_ensemble(g, 500, 2, 42).increments
    assert np.array_equal(a, b)
    c = sample_ensemble(g, 500, 2, 43).increments
    assert not np.array_equal(a, c)


def test_single_path_regeneration_matches_slice():
    g = make_grid(0, 1, 13)
    ens = sample_ensemble(g, 300, 3, 7)
    for j in (0, 1, 150, 299):
        assert np.array_equal(path_increments(g, 3, 7, j), ens.increments[j])
    assert np.array_equal(ens.block(17, 91), ens.increments[17:91])


def test_worker_count_does_not_change_increments():
    g = make_grid(0, 1, 10)
    a = sample_ensemble(g, 20000, 1, 3, workers=1).increments
    b = sample_ensemble(g, 20000, 1, 3, workers=8).increments
    assert np.array_equal(a, b)


def test_increment_variance_and_mean():
    g = make_grid(0, 1, 100)
    dw = sample_ensemble(g, 100_000, 1, 11).increments[:, :, 0]
    var = dw.var(axis=0)
    assert np.all((var >= 0.009) & (var <= 0.011))
    assert np.all(np.abs(dw.mean(axis=0)) <= 4 * np.sqrt(g.dt / dw.shape[0]))


def test_antithetic_pairs():
    g = make_grid(0, 1, 8)
    ens = sample_ensemble(g, 11, 2, 5, antithetic=True)
    inc = ens.increments
    assert np.array_equal(inc[1::2], -inc[0:10:2])
    assert np.array_equal(ens.block(3, 8), inc[3:8])
    assert np.array_equal(path_increments(g, 2, 5, 7, antithetic=True), inc[7])


def test_brownian_starts_at_zero_and_covariance():
    g = make_grid(0, 2, 10)
    W = sample_ensemble(g, 20000, 2, 9).brownian()
    assert np.all(W[:, 0] == 0)
    cov = np.cov(W[:, -1].T)
    np.testing.assert_allclose(np.diag(cov), [2.0, 2.0], rtol=0.05)
    assert abs(cov[0, 1]) < 0.05 * 2


def test_ensemble_rejects():
    g = make_grid(0, 1, 4)
    for args in [(0, 1, 0), (5, 0, 0), (5, 1, -1)]:
        with pytest.raises(DomainError):
            sample_ensemble(g, *args)
