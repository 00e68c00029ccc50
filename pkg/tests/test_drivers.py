import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from fbsdelab.drivers import (a_priori_bound, build_linearizer, cos_terminal, cross_linear_driver,
                              cross_quadratic_driver, drift_quadratic_driver, entropic_driver,
                              exponential_driver, make_driver, make_terminal, make_truncation, probe_terminal,
                              risk_measure_driver, tanh_terminal, truncate_driver, validate_driver)
from fbsdelab.errors import DomainError, TransformRangeError


@pytest.mark.parametrize("drv", [
    cross_linear_driver(0.7), cross_quadratic_driver(1.0), drift_quadratic_driver(0.4, 0.3),
    risk_measure_driver(0.5, 1.5), entropic_driver(1.0), make_driver("lipschitz", {"lam": 2.0}),
    make_driver("burgers", {"a": 1.0, "lam": 1.0, "epsilon": 0.5}), make_driver("damping"),
])
def test_builtin_drivers_pass_validation(drv):
    rep = validate_driver(drv, 4096, seed=1)
    assert rep.passed, (rep.growth_ratio, rep.lipschitz_ratio)


def test_exponential_driver_fails_with_large_witness():
    rep = validate_driver(exponential_driver(), 2048)
    assert not rep.passed
    assert rep.growth_witness[0] > 5


def test_validation_rejects_empty_cloud():
    with pytest.raises(DomainError):
        validate_driver(cross_linear_driver(1.0), 0)


def test_risk_measure_needs_ordered_constants():
    with pytest.raises(DomainError):
        risk_measure_driver(1.0, 0.5)


def test_a_priori_bound_value():
    assert a_priori_bound(1.0, 1.0, 1.0) == pytest.approx(np.e * 2)


@pytest.mark.parametrize("n", [2, 3, 5, 10])
def test_truncation_properties(n):
    h = make_truncation(n)
    x = np.linspace(-3 * n, 3 * n, 200_001)
    y = h(x)
    d = h.derivative(x)
    assert np.all(np.abs(y) <= n + 1e-12)
    assert np.all(np.abs(y) <= np.abs(x) + 1e-12)
    assert np.all(np.abs(d) <= 1 + 1e-12)
    core = np.abs(x) <= n - 1
    np.testing.assert_array_equal(y[core], x[core])
    tail = np.abs(x) >= n + 1
    np.testing.assert_array_equal(y[tail], np.sign(x[tail]) * n)
    np.testing.assert_allclose(y, -h(-x), atol=0)
    assert np.max(np.abs(np.diff(d))) < 1e-3        # derivative has no jumps on this grid
    # the derivative matches finite differences of h
    mid = 0.5 * (x[1:] + x[:-1])
    np.testing.assert_allclose(np.diff(y) / np.diff(x), h.derivative(mid), atol=1e-6)


def test_truncation_examples():
    h = make_truncation(3)
    assert h(2.0) == 2.0
    assert h(5.0) == 3.0 and h(-5.0) == -3.0
    for n in (2, 4, 9):
        assert make_truncation(n).derivative(0.0) == 1.0
    with pytest.raises(DomainError):
        make_truncation(1)


def test_truncated_driver_examples():
    drv = cross_quadratic_driver(1.0)
    fn = truncate_driver(drv, make_truncation(3))
    one = np.ones((1, 1))
    assert fn.f(0.0, one, np.array([10.0]), one)[0] == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    y = rng.uniform(-2, 2, 500)
    z = rng.normal(size=(500, 1))
    x = np.zeros((500, 1))
    np.testing.assert_array_equal(fn.f(0, x, y, z), drv.f(0, x, y, z))
    # |f_n| <= K (1 + C_n (1 + |z|^2)) with C_n = n
    y = rng.uniform(-50, 50, 500)
    assert np.all(np.abs(fn.f(0, x, y, z)) <= drv.K * (1 + 3 * (1 + np.sum(z ** 2, axis=1))) + 1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("drv", [cross_quadratic_driver(1.0), cross_linear_driver(0.5), risk_measure_driver(0.5, 1.0)])
def test_truncated_drivers_keep_constants(drv, n):
    assert validate_driver(truncate_driver(drv, make_truncation(n)), 2048, seed=3).passed


def test_linearizer_entropic_closed_form():
    gam = 1.3
    lin = build_linearizer(lambda y: np.full_like(y, gam / 2), 3.0)
    y = np.linspace(-3, 3, 101)
    np.testing.assert_allclose(lin(y), np.expm1(gam * y) / gam, rtol=1e-9, atol=1e-12)
    assert lin(np.array([0.0]))[0] == 0.0
    assert lin.derivative(np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-12)


def test_linearizer_identity():
    lin = build_linearizer(lambda y: np.zeros_like(y), 2.0)
    y = np.linspace(-2, 2, 57)
    np.testing.assert_allclose(lin(y), y, atol=1e-14)


def test_linearizer_cross_quadratic_oracle():
    lin = build_linearizer(lambda y: y, 2.0)
    oracle = quad(lambda s: np.exp(s * s), 0, 1, epsabs=1e-13)[0]
    assert oracle == pytest.approx(1.46265, abs=1e-5)
    assert lin(np.array([1.0]))[0] == pytest.approx(oracle, abs=1e-10)


@pytest.mark.parametrize("coef", [lambda y: y, lambda y: np.full_like(y, 0.5), lambda y: np.sin(3 * y)])
def test_linearizer_invariants(coef):
    lin = build_linearizer(coef, 2.5)
    y = np.linspace(-2.5, 2.5, 1001)
    np.testing.assert_allclose(lin.inverse(lin(y)), y, atol=1e-8)
    assert np.all(np.diff(lin.phi) > 0)
    assert np.all(lin.dphi > 0)
    probes = np.linspace(-2.4, 2.4, 100)
    h = 1e-4
    d2 = (lin(probes + h) - 2 * lin(probes) + lin(probes - h)) / h ** 2
    resid = coef(probes) * lin.derivative(probes) - 0.5 * d2
    assert np.max(np.abs(resid) / np.maximum(1, lin.derivative(probes))) <= 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_linearizer_range_errors():
    lin = build_linearizer(lambda y: y, 1.0)
    with pytest.raises(TransformRangeError):
        lin(np.array([1.5]))
    with pytest.raises(TransformRangeError):
        lin.inverse(np.array([lin.range[1] + 1]))
    with pytest.raises(DomainError):
        build_linearizer(lambda y: 50 * y ** 3, 10.0)
    with pytest.raises(DomainError):
        build_linearizer(lambda y: y, -1.0)


def test_terminal_registry_and_probe():
    tc = make_terminal("cos", {"amp": 2.0, "shift": 0.5})
    assert tc.M == 2.5 and tc.lipschitz == 2.0
    assert probe_terminal(tc) == (True, True)
    assert probe_terminal(tanh_terminal(1.0, 3.0)) == (True, True)
    with pytest.raises(DomainError):
        make_terminal("cos", {"ampl": 1})
    with pytest.raises(DomainError):
        make_terminal("nope")
    with pytest.raises(DomainError):
        make_driver("entropic", {"gama": 1})


@given(st.floats(-1e3, 1e3), st.integers(2, 20))
@settings(max_examples=200, deadline=None)
def test_truncation_pointwise(x, n):
    h = make_truncation(n)
    v = float(h(x))
    assert abs(v) <= min(n, abs(x)) + 1e-12
    assert abs(float(h.derivative(x))) <= 1 + 1e-12


def test_shifted_driver():
    drv = make_driver("entropic", {"gamma": 1.0, "shift": 0.2})
    z = np.zeros((3, 1))
    np.testing.assert_allclose(drv.f(0, z, np.zeros(3), z), 0.2)


def test_cos_gradient():
    tc = cos_terminal(1.5, 2.0, 0.3)
    x = np.linspace(-2, 2, 9)[:, None]
    h = 1e-6
    fd = (tc.g(x + h) - tc.g(x - h)) / (2 * h)
    np.testing.assert_allclose(tc.grad(x)[:, 0], fd, atol=1e-8)
