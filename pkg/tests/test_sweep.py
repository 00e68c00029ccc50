import numpy as np
import pytest
from scipy.integrate import quad

from fbsdelab.drivers import cos_terminal, lipschitz_driver, zero_driver
from fbsdelab.errors import DomainError
from fbsdelab.forward import brownian_model, constant_model, ou_model
from fbsdelab.regression import RegressionBasis
from fbsdelab.sweep import SweepConfig, crn_variance_ratio, fit_slope, jackknife_band, limit_consistency, run_sweep

SHIPPED_EPS = (0.4, 0.2, 0.1, 0.05)


def heat_terminal_gap(eps, T=1.0):
    """RMS of cos(sqrt(eps) W_T) - 1."""
    return np.sqrt((1 + np.exp(-2 * eps * T)) / 2 - 2 * np.exp(-eps * T / 2) + 1)


def heat_z_norm(eps, x, T=1.0):
    """sqrt(E int eps e^{-eps(T-t)} sin^2(x + sqrt(eps) W_t) dt)."""
    val, _ = quad(lambda t: eps * np.exp(-eps * (T - t)) * (1 - np.cos(2 * x) * np.exp(-2 * eps * t)) / 2, 0, T)
    return np.sqrt(val)


def test_slope_helpers():
    e = np.array([0.4, 0.2, 0.1, 0.05])
    assert fit_slope(e, 3 * e ** 0.5) == pytest.approx(0.5)
    s, (lo, hi) = jackknife_band(e, 2 * e)
    assert s == pytest.approx(1.0) and lo == pytest.approx(1.0) and hi == pytest.approx(1.0)
    _, band = jackknife_band(e[:2], e[:2])
    assert np.isnan(band[0])


def test_config_validation():
    base = dict(model=brownian_model(), driver=zero_driver(), terminal=cos_terminal())
    for bad in [(), (0.0, 0.1), (1.5,), (0.1, 0.1)]:
        with pytest.raises(DomainError):
            SweepConfig(eps_list=bad, **base)
    with pytest.raises(DomainError):
        SweepConfig(eps_list=(0.1,), p=1.0, **base)
    assert SweepConfig(eps_list=(0.1, 0.4), **base).eps_list == (0.4, 0.1)


@pytest.fixture(scope="module")
def heat_sweep():
    cfg = SweepConfig(brownian_model(), zero_driver(), cos_terminal(), (0.2, 0.1, 0.05), probes=(0.0,),
                      n_paths=40_000, n_steps=25, seed=5, basis=RegressionBasis("poly", 6))
    return run_sweep(cfg)


def test_heat_gap_closed_form(heat_sweep):
    for r in heat_sweep.rows:
        assert r.gap_y == pytest.approx(heat_terminal_gap(r.epsilon), rel=0.05)
    rows = heat_sweep.rows
    for a, b in zip(rows, rows[1:]):
        assert a.gap_y / b.gap_y == pytest.approx(2.0, rel=0.1)
    assert heat_sweep.slope == pytest.approx(1.0, abs=0.1)


def test_heat_z_ratio_away_from_critical_point():
    cfg = SweepConfig(brownian_model(), zero_driver(), cos_terminal(), (0.4, 0.2, 0.1, 0.05), probes=(1.0,),
                      n_paths=20_000, n_steps=25, seed=6, basis=RegressionBasis("poly", 6))
    res = run_sweep(cfg)
    for r in res.rows:
        assert r.norm_z == pytest.approx(heat_z_norm(r.epsilon, 1.0), rel=0.1)
    rep = limit_consistency(cfg, res)
    assert rep.z_monotone
    for ratio in rep.z_ratios:
        assert ratio == pytest.approx(2.0, rel=0.2)


@pytest.fixture(scope="module")
def shipped():
    cfg = SweepConfig(ou_model(), lipschitz_driver(1.0), cos_terminal(), SHIPPED_EPS, probes=(0.0, 0.5, 1.0),
                      n_paths=10_000, n_steps=50, seed=0)
    return cfg, run_sweep(cfg)


def test_shipped_slope_band(shipped):
    cfg, res = shipped
    lo, hi = res.slope_band
    assert res.slope >= 0.45 and lo > 0
    assert lo <= res.slope <= hi
    assert not res.degenerate and not any(r.flagged for r in res.rows)
    assert max(r.max_abs_y for r in res.rows) <= res.y_bound


def test_shipped_limit_consistency(shipped):
    cfg, res = shipped
    rep = limit_consistency(cfg, res)
    assert rep.z_monotone and rep.y_close and rep.passed
    assert rep.y_tolerance >= cfg.T / cfg.n_steps + SHIPPED_EPS[-1]
    strict = limit_consistency(cfg, res, disc_tol=0.0)
    assert strict.y_tolerance < rep.y_tolerance


def test_common_random_numbers_help():
    cfg = SweepConfig(ou_model(), lipschitz_driver(1.0), cos_terminal(), (0.4, 0.2), probes=(0.5,),
                      n_paths=4000, n_steps=20, seed=11)
    assert crn_variance_ratio(cfg, n_rep=24) >= 4.0
    with pytest.raises(DomainError):
        crn_variance_ratio(SweepConfig(ou_model(), zero_driver(), cos_terminal(), (0.4,)))


def test_no_noise_is_degenerate():
    cfg = SweepConfig(constant_model(0.0, 0.0), lipschitz_driver(1.0), cos_terminal(), SHIPPED_EPS,
                      probes=(0.3,), n_paths=200, n_steps=20)
    res = run_sweep(cfg)
    # Z sits at the regression noise floor; the gap is the Euler floor, identical in every row
    assert all(r.norm_z <= 1e-8 for r in res.rows)
    assert len({r.gap_y for r in res.rows}) == 1 and res.rows[0].gap_y <= 2 * cfg.T / cfg.n_steps
    assert res.degenerate and np.isnan(res.slope) and np.isnan(res.z_slope)
