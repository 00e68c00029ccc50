import numpy as np
import pytest
from scipy.stats import norm

from fbsdelab.drivers import damping_driver, tanh_terminal
from fbsdelab.errors import DomainError
from fbsdelab.forward import brownian_model, constant_model, ou_model, tanh_drift_model
from fbsdelab.grid import make_grid, sample_ensemble
from fbsdelab.ldp import (ActionProblem, EndpointBall, Everywhere, TerminalHalfspace, action, action_details,
                          discrete_flow, empirical_ldp, extrapolate, minimize_rate, rate_for_Y, sup_exit,
                          tube_exit)
from fbsdelab.pde import limit_field

BM = brownian_model(1)


def line(x, y, K):
    return np.linspace(x, y, K + 1)


class TestAction:
    def test_straight_line(self):
        for T, y in [(1.0, 2.0), (0.5, -1.0), (2.0, 0.3)]:
            p = ActionProblem(BM, [0.0], T, n_nodes=16)
            assert action(p, line(0.0, y, 16)) == pytest.approx(y * y / (2 * T), rel=1e-12)

    def test_kinked_path(self):
        p = ActionProblem(BM, [0.0], 1.0, n_nodes=2)
        assert action(p, [0.0, 1.0, 0.0]) == pytest.approx(2.0, rel=1e-12)

    def test_flow_has_zero_action(self):
        p = ActionProblem(tanh_drift_model(2.0, 0.5), [1.5], 1.0, n_nodes=40)
        flow = discrete_flow(p)
        assert action(p, flow) <= 1e-20
        val, grad, ok = action_details(p, flow)
        assert ok and np.max(np.abs(grad)) <= 1e-8

    def test_positive_off_flow(self):
        p = ActionProblem(tanh_drift_model(), [0.2], 1.0, n_nodes=20)
        rng = np.random.default_rng(3)
        for _ in range(10):
            path = discrete_flow(p) + np.concatenate([[[0.0]], 0.1 * rng.standard_normal((20, 1))])
            assert action(p, path) > 0

    def test_gradient_matches_differences(self):
        p = ActionProblem(tanh_drift_model(1.3, 0.8), [0.1], 1.0, n_nodes=8)
        rng = np.random.default_rng(0)
        path = np.concatenate([[[0.1]], rng.standard_normal((8, 1))])
        _, grad, _ = action_details(p, path)
        h = 1e-6
        for k in range(1, 9):
            up, dn = path.copy(), path.copy()
            up[k] += h
            dn[k] -= h
            assert grad[k, 0] == pytest.approx((action(p, up) - action(p, dn)) / (2 * h), rel=1e-5, abs=1e-8)

    def test_singular_noise_is_infinite(self):
        degenerate = constant_model([0.0, 0.0], [[1.0], [0.0]])
        p = ActionProblem(degenerate, [0.0, 0.0], 1.0, n_nodes=4)
        val, _, ok = action_details(p, np.zeros((5, 2)))
        assert val == np.inf and not ok
        assert p.formulation == "control"

    def test_validation(self):
        with pytest.raises(DomainError):
            ActionProblem(ou_model(), [0.0], 1.0)
        with pytest.raises(DomainError):
            ActionProblem(BM, [0.0, 1.0], 1.0)
        p = ActionProblem(BM, [0.0], 1.0, n_nodes=4)
        with pytest.raises(DomainError):
            action(p, [1.0, 0.0, 0.0, 0.0, 0.0])


class TestMinimizeRate:
    def test_flow_endpoint_is_free(self):
        model = tanh_drift_model()
        p = ActionProblem(model, [1.0], 1.0, n_nodes=32)
        end = discrete_flow(p)[-1, 0]
        r = minimize_rate(p.with_event(EndpointBall((end,))))
        assert r.value == 0.0
        np.testing.assert_allclose(r.path, discrete_flow(p))

    def test_endpoint_straight(self):
        p = ActionProblem(BM, [0.0], 2.0, EndpointBall((1.5,)), n_nodes=32)
        r = minimize_rate(p)
        assert r.value == pytest.approx(1.5 ** 2 / 4, rel=1e-6)
        assert np.max(np.abs(r.path[:, 0] - line(0.0, 1.5, 32))) <= 1e-3
        assert r.path[0, 0] == 0.0

    def test_sup_event(self):
        for delta, T in [(1.0, 1.0), (0.7, 2.0)]:
            r = minimize_rate(ActionProblem(BM, [0.0], T, sup_exit(delta), n_nodes=32))
            assert r.value == pytest.approx(delta ** 2 / (2 * T), rel=1e-6)
            assert r.hit_node == 32

    def test_tube_and_halfspace(self):
        r = minimize_rate(ActionProblem(BM, [0.0], 1.0, tube_exit(1.0), n_nodes=16))
        assert r.value == pytest.approx(0.5, rel=1e-6)
        r = minimize_rate(ActionProblem(BM, [0.0], 1.0, TerminalHalfspace((-1.0,), 2.0), n_nodes=16))
        assert r.value == pytest.approx(2.0, rel=1e-6)
        assert r.path[-1, 0] == pytest.approx(-2.0)

    def test_noise_scaling(self):
        base = minimize_rate(ActionProblem(brownian_model(1, 1.0), [0.0], 1.0, sup_exit(1.0), n_nodes=16)).value
        wide = minimize_rate(ActionProblem(brownian_model(1, 2.0), [0.0], 1.0, sup_exit(1.0), n_nodes=16)).value
        assert wide == pytest.approx(base / 4, rel=1e-6)

    @pytest.mark.parametrize("event", [sup_exit(1.2), EndpointBall((-0.5,)), TerminalHalfspace((1.0,), 1.0)])
    def test_node_doubling(self, event):
        p = ActionProblem(tanh_drift_model(1.5, 0.7), [0.3], 1.0, event, n_nodes=16)
        a = minimize_rate(p).value
        b = minimize_rate(p.with_nodes(32)).value
        assert abs(a - b) <= 0.01 * b

    def test_two_dimensional(self):
        p = ActionProblem(brownian_model(2), [0.0, 0.0], 1.0, EndpointBall((1.0, 1.0), 0.5), n_nodes=8)
        r = minimize_rate(p)
        assert r.value == pytest.approx((np.sqrt(2) - 0.5) ** 2 / 2, rel=1e-5)

    def test_control_formulation(self):
        degenerate = constant_model([0.0, 0.0], [[1.0], [0.0]])
        p = ActionProblem(degenerate, [0.0, 0.0], 1.0, TerminalHalfspace((1.0, 0.0), 1.0), n_nodes=16)
        r = minimize_rate(p)
        # penalty continuation leaves a small constraint slack
        assert r.value == pytest.approx(0.5, rel=1e-2)
        unreachable = p.with_event(TerminalHalfspace((0.0, 1.0), 1.0))
        r = minimize_rate(unreachable)
        assert r.value == np.inf and not r.feasible
        q = ActionProblem(BM, [0.0], 1.0, EndpointBall((1.0,)), n_nodes=16, formulation="control")
        assert minimize_rate(q).value == pytest.approx(0.5, rel=1e-2)


class TestRateForY:
    def test_identity_field(self):
        p = ActionProblem(BM, [0.0], 1.0, n_nodes=16)
        ident = lambda k, xs: np.asarray(xs, dtype=float).reshape(-1)
        psi = line(0.0, 1.0, 16)
        assert rate_for_Y(p, ident, psi).value == pytest.approx(action(p, psi), rel=1e-9)
        ev = TerminalHalfspace((1.0,), 1.0)
        assert rate_for_Y(p, ident, ev).value == pytest.approx(minimize_rate(p.with_event(ev)).value, rel=1e-6)
        assert rate_for_Y(p, ident, Everywhere()).value == 0.0

    def test_constant_field(self):
        p = ActionProblem(BM, [0.0], 1.0, n_nodes=8)
        const = lambda k, xs: np.full(np.asarray(xs).reshape(-1).shape, 0.3)
        assert rate_for_Y(p, const, np.full(9, 0.3)).value == 0.0
        assert rate_for_Y(p, const, np.full(9, 0.4)).value == np.inf
        assert rate_for_Y(p, const, TerminalHalfspace((1.0,), 0.5)).value == np.inf

    def test_monotone_pullback(self):
        model = tanh_drift_model(1.0, 0.8)
        grid = make_grid(0, 1, 16)
        u0 = limit_field(model, damping_driver(0.5), tanh_terminal(), grid)
        p = ActionProblem(model, [0.0], 1.0, n_nodes=16)
        c = 0.5
        via_y = rate_for_Y(p, u0, TerminalHalfspace((1.0,), c))
        direct = minimize_rate(p.with_event(TerminalHalfspace((1.0,), np.arctanh(c))))
        assert via_y.value == pytest.approx(direct.value, abs=1e-6)

    def test_bad_start(self):
        p = ActionProblem(BM, [0.0], 1.0, n_nodes=4)
        ident = lambda k, xs: np.asarray(xs, dtype=float).reshape(-1)
        assert rate_for_Y(p, ident, np.ones(5)).value == np.inf
        with pytest.raises(DomainError):
            rate_for_Y(p, ident, np.zeros(3))


class TestEmpirical:
    grid = make_grid(0, 1, 200)

    def test_whole_space(self):
        ens = sample_ensemble(self.grid, 500, 1, 0)
        rows = empirical_ldp(BM, [0.0], [1.0, 0.5, 0.1], Everywhere(), ens)
        assert all(r.eps_log_p == 0.0 and not r.flagged for r in rows)

    def test_zero_hits_flagged(self):
        ens = sample_ensemble(self.grid, 200, 1, 1)
        rows = empirical_ldp(BM, [0.0], [0.5, 0.001], tube_exit(1.0), ens)
        assert rows[1].flagged and rows[1].hits == 0 and np.isnan(rows[1].eps_log_p)
        assert not rows[0].flagged

    def test_reflection_tail(self):
        ens = sample_ensemble(self.grid, 100_000, 1, 2)
        eps = [0.5, 0.25, 0.125]
        rows = empirical_ldp(BM, [0.0], eps, tube_exit(1.0), ens)
        # leading-order two-sided reflection tail, inflated by discrete monitoring
        oracle = [e * np.log(4 * norm.sf(1 / np.sqrt(e))) for e in eps]
        for r, o in zip(rows, oracle):
            assert r.eps_log_p == pytest.approx(o, abs=0.05 + 3 * r.stderr)
        vals = [r.eps_log_p for r in rows]
        assert all(-0.7 < v < -0.5 for v in vals)
        rate = minimize_rate(ActionProblem(BM, [0.0], 1.0, tube_exit(1.0), n_nodes=16)).value
        assert abs(vals[-1] + rate) <= 0.25 * rate
        intercept, _ = extrapolate(rows)
        assert np.isfinite(intercept)

    def test_validation(self):
        ens = sample_ensemble(self.grid, 10, 1, 0)
        with pytest.raises(DomainError):
            empirical_ldp(BM, [0.0], [0.0], Everywhere(), ens)
