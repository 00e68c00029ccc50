import numpy as np
import pytest

from fbsdelab.errors import DomainError, SimulationError
from fbsdelab.forward import (ForwardModel, brownian_model, constant_model, gap_table, measure_perturbation_gap,
                              ou_model, simulate_forward, solve_deterministic_flow, tanh_drift_model)
from fbsdelab.grid import make_grid, sample_ensemble


def test_frozen_dynamics():
    model = constant_model(0.0, 0.0)
    g = make_grid(0, 1, 10)
    fp = simulate_forward(model, g, sample_ensemble(g, 50, 1, 0), [3.0])
    assert np.all(fp.states == 3.0)


def test_brownian_states_are_cumulative_sums():
    g = make_grid(0, 1, 20)
    ens = sample_ensemble(g, 100_000, 1, 1)
    fp = simulate_forward(brownian_model(1), g, ens, [0.0])
    np.testing.assert_allclose(fp.states, ens.brownian(), atol=1e-12)
    v = fp.states[:, -1, 0].var()
    assert 0.95 <= v <= 1.05


def test_zero_noise_ou_close_to_exponential():
    g = make_grid(0, 1, 100)
    fp = simulate_forward(ou_model(1.0, 1.0), g, sample_ensemble(g, 5, 1, 0), [1.0], epsilon=0.0)
    assert np.all(fp.states[:, -1] == fp.states[0, -1])
    assert abs(fp.states[0, -1, 0] - np.exp(-1)) <= g.dt


def test_start_point_every_path():
    g = make_grid(0, 1, 5)
    fp = simulate_forward(brownian_model(2), g, sample_ensemble(g, 40, 2, 0), [1.0, -2.0])
    assert np.all(fp.states[:, 0] == [1.0, -2.0])


def test_deterministic_flow_examples():
    g = make_grid(0, 1, 100)
    assert abs(solve_deterministic_flow(ou_model(), g, [1.0])[-1, 0] - 0.367879) <= 1e-6
    np.testing.assert_array_equal(solve_deterministic_flow(brownian_model(), g, [0.7])[:, 0], 0.7)
    g2 = make_grid(0, 2, 10)
    assert solve_deterministic_flow(constant_model(1.0, 0.0), g2, [0.0])[-1, 0] == pytest.approx(2.0, abs=1e-14)


def test_euler_vs_rk4_order_dt():
    devs = []
    for n in (20, 40, 80):
        g = make_grid(0, 1, n)
        model = tanh_drift_model(1.5, 1.0)
        e = simulate_forward(model, g, sample_ensemble(g, 1, 1, 0), [0.3], epsilon=0.0).states[0, :, 0]
        r = solve_deterministic_flow(model, g, [0.3])[:, 0]
        devs.append(np.max(np.abs(e - r)) / g.dt)
    assert max(devs) <= 2 * min(devs)


def test_gap_examples():
    g = make_grid(0, 1, 50)
    ens = sample_ensemble(g, 20000, 1, 2)
    bm = brownian_model()
    assert measure_perturbation_gap(bm, g, ens, [0.0], 0.0) == 0.0
    assert measure_perturbation_gap(constant_model(1.0, 0.0), g, ens, [0.0], 0.5) == 0.0
    r = measure_perturbation_gap(bm, g, ens, [0.0], 0.4) / measure_perturbation_gap(bm, g, ens, [0.0], 0.1)
    assert r == pytest.approx(2.0, rel=0.05)


def test_gap_exponent_is_measured_near_half():
    g = make_grid(0, 1, 50)
    ens = sample_ensemble(g, 5000, 1, 2)
    rows, slopes = gap_table(ou_model(1.0, 1.0), g, ens, [0.5], [0.4, 0.2, 0.1, 0.05])
    assert [r[0] for r in rows] == [0.4, 0.2, 0.1, 0.05]
    for s in slopes:
        assert s >= 0.45
        assert s == pytest.approx(0.5, abs=0.02)


def test_gap_rejects_bad_arguments():
    g = make_grid(0, 1, 5)
    ens = sample_ensemble(g, 10, 1, 0)
    with pytest.raises(DomainError):
        measure_perturbation_gap(brownian_model(), g, ens, [0.0], 1.5)
    with pytest.raises(DomainError):
        measure_perturbation_gap(brownian_model(), g, ens, [0.0], 0.5, p=1.0)


def test_mismatched_inputs():
    g = make_grid(0, 1, 5)
    with pytest.raises(DomainError):
        simulate_forward(brownian_model(2), g, sample_ensemble(g, 10, 1, 0), [0.0, 0.0])
    with pytest.raises(DomainError):
        simulate_forward(brownian_model(), make_grid(0, 1, 6), sample_ensemble(g, 10, 1, 0), [0.0])
    with pytest.raises(DomainError):
        simulate_forward(brownian_model(), g, sample_ensemble(g, 10, 1, 0), [0.0], epsilon=-1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_names_step_and_path():
    model = ForwardModel(1, 1, lambda t, x: x ** 3, lambda t, x: np.ones((x.shape[0], 1, 1)), 1.0)
    g = make_grid(0, 1, 50)
    with pytest.raises(SimulationError) as err:
        simulate_forward(model, g, sample_ensemble(g, 8, 1, 0), [5.0])
    assert err.value.step is not None and err.value.path is not None
    assert "step" in str(err.value) and "path" in str(err.value)


def test_probe_report_records_wrong_constant():
    good = ou_model(2.0, 1.0)
    assert good.report.passed
    bad = ForwardModel(1, 1, lambda t, x: 3 * x, lambda t, x: np.ones((x.shape[0], 1, 1)), 1.0)
    assert not bad.report.lipschitz_ok
    assert bad.report.lipschitz_ratio > 2.9
