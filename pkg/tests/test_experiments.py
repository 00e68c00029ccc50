import numpy as np
import pytest

from fbsdelab.drivers import constant_terminal, cos_terminal, tanh_terminal
from fbsdelab.errors import DomainError
from fbsdelab.experiments import (SUITES, Ns2dProblem, run_burgers_damping, run_ns2d, run_proptests, taylor_green,
                                  uniform_flow)
from fbsdelab.regression import RegressionBasis


class TestBurgers:
    @pytest.mark.parametrize("a", [0.0, 1.0, 3.0])
    def test_constant_terminal_decays(self, a):
        rep = run_burgers_damping(a, 0.8, [0.5, 0.1], constant_terminal(0.6), n_paths=2000, n_steps=50)
        for r in rep.rows:
            assert r.y0 == pytest.approx(0.6 * np.exp(-0.8), rel=1 / 50)
            assert r.y0_stderr <= 1e-6 and r.sup_ok
        assert rep.passed

    def test_no_transport_no_damping_is_heat(self):
        rep = run_burgers_damping(0.0, 0.0, [0.5, 0.25], cos_terminal(), n_paths=40_000, n_steps=20,
                                  basis=RegressionBasis("poly", 6))
        for r in rep.rows:
            assert r.y0 == pytest.approx(np.exp(-r.epsilon), abs=4 * r.y0_stderr + 1e-3)

    def test_bounded_and_matches_fd(self):
        rep = run_burgers_damping(1.0, 0.5, [0.5], tanh_terminal(), n_paths=20_000, n_steps=50,
                                  fd_probes=[-0.5, 0.0, 0.5], n_x=200, n_t=400)
        r = rep.rows[0]
        assert r.sup_ok and r.max_abs_y <= 1.0 + 3 * r.y0_stderr
        assert r.fd_deviation <= 2e-2
        assert rep.lipschitz_bound == pytest.approx(np.sqrt(2.0))

    def test_coupled_lipschitz(self):
        rep = run_burgers_damping(1.0, 0.5, [0.5], tanh_terminal(), n_paths=5000, n_steps=20, coupled=True,
                                  coupled_paths=5000)
        r = rep.rows[0]
        assert r.coupled_converged and len(r.coupled_history) >= 1
        assert r.lipschitz <= rep.lipschitz_bound

    def test_negative_damping_rejected(self):
        with pytest.raises(DomainError):
            run_burgers_damping(1.0, -0.1, [0.5], cos_terminal())


class TestNs2d:
    def test_problem_checks_stream_function(self):
        psi, h, jac = taylor_green()
        with pytest.raises(DomainError):
            Ns2dProblem(0.1, (0.0, 0.0), psi, lambda x: -h(x), jac)
        with pytest.raises(DomainError):
            Ns2dProblem(0.0, (0.0, 0.0), psi, h, jac)
        with pytest.raises(DomainError):
            Ns2dProblem(0.1, (0.0,), psi, h, jac)
        assert Ns2dProblem(0.1, (0.0, 0.0), psi, h, jac, n_grid=8).points.shape == (64, 2)

    def test_uniform_flow_is_exact(self):
        psi, h, jac = uniform_flow((0.5, -0.25))
        prob = Ns2dProblem(0.2, (0.1, -0.3), psi, h, jac, T=0.5, n_grid=6, n_paths=1000, n_steps=10)
        rep = run_ns2d(prob, seed=1)
        expected = np.array([0.5, -0.25]) - np.array([0.1, -0.3]) * 0.5
        np.testing.assert_allclose(rep.u0, np.broadcast_to(expected, rep.u0.shape), atol=1e-6)
        assert rep.div_fd <= 1e-6 and rep.div_gradient <= 1e-6 and rep.passed

    def test_taylor_green(self):
        psi, h, jac = taylor_green()
        prob = Ns2dProblem(0.1, (0.0, 0.0), psi, h, jac, T=0.5, n_grid=12, n_paths=6000, n_steps=20)
        rep = run_ns2d(prob, seed=3, batch=40)
        exact = np.exp(-2 * 0.1 * 0.5) * h(rep.points)
        assert np.max(np.abs(rep.u0 - exact)) <= 3e-2
        assert rep.passed and rep.routes_agree

    def test_batching_does_not_change_results(self):
        psi, h, jac = taylor_green(0.5)
        prob = Ns2dProblem(0.2, (0.0, 0.0), psi, h, jac, n_grid=4, n_paths=800, n_steps=5)
        a, b = run_ns2d(prob, seed=2, batch=16), run_ns2d(prob, seed=2, batch=3)
        np.testing.assert_allclose(a.u0, b.u0, rtol=0, atol=1e-12)


def test_property_suites():
    rep = run_proptests(seed=0, n_paths=10_000, n_steps=20, n_pairs=6)
    summary = rep.summary()
    assert set(summary) == set(SUITES)
    failing = [(c.suite, c.name, c.details) for c in rep.cases if not c.passed]
    assert rep.passed, failing
    with pytest.raises(DomainError):
        run_proptests(["nope"])


def test_ns2d_strong_viscosity_flattens_field():
    psi, h, jac = taylor_green()
    K = (0.2, -0.4)
    prob = Ns2dProblem(5.0, K, psi, h, jac, T=0.5, n_grid=6, n_paths=4000, n_steps=10)
    rep = run_ns2d(prob, seed=4)
    # the periodic mean of h is zero, so only the pressure drift survives
    limit = -np.asarray(K) * 0.5
    assert np.max(np.abs(rep.u0 - limit)) <= np.exp(-2 * 5.0 * 0.5) + 2e-2
