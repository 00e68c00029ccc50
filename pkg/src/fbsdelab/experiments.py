"""Shipped applications: Burgers with damping, 2-D Navier-Stokes, property suites."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .bsde import solve_bsde, solve_coupled_burgers, solve_gradient
from .drivers import (Driver, TerminalCondition, cos_terminal, cross_linear_driver, cross_quadratic_driver,
                      damping_driver, drift_quadratic_driver, entropic_driver, lipschitz_driver,
                      make_truncation, shifted, truncate_driver, zero_driver, a_priori_bound, burgers_driver)
from .errors import DomainError, RegressionError, SimulationError
from .forward import brownian_model, simulate_forward
from .grid import make_grid, sample_ensemble
from .pde import PdeProblem, compare_field, padded_domain, solve_pde
from .regression import RegressionBasis, projector


# --- Burgers with damping ------------------------------------------------------

@dataclass(frozen=True)
class BurgersRow:
    epsilon: float
    y0: float
    y0_stderr: float
    max_abs_y: float
    sup_g: float
    sup_ok: bool
    fd_deviation: float = float("nan")
    lipschitz: float = float("nan")
    coupled_converged: Optional[bool] = None
    coupled_history: tuple = ()
    flagged: bool = False
    message: str = ""


@dataclass(frozen=True)
class BurgersReport:
    a: float
    lam: float
    rows: List[BurgersRow]
    lipschitz_bound: float

    @property
    def passed(self) -> bool:
        return all(r.sup_ok and not r.flagged for r in self.rows)


def run_burgers_damping(a: float, lam: float, eps_list: Sequence[float], tc: TerminalCondition,
                        n_paths: int = 20000, n_steps: int = 50, T: float = 1.0, seed: int = 0,
                        x0: float = 0.0, basis: Optional[RegressionBasis] = None,
                        fd_probes: Optional[Sequence[float]] = None, n_x: int = 400, n_t: int = 400,
                        coupled: bool = False, coupled_paths: int = 20000, coupled_basis=None,
                        outer_iters: int = 10, tol: float = 1e-3, workers: int = 1) -> BurgersReport:
    """Viscous Burgers with damping through ``X = x + sqrt(2 eps) W``.

    Per epsilon: solve the backward equation with driver
    ``-(a / sqrt(2 eps)) y z - lam y`` and check ``sup |Y| <= sup|g| + 3 stderr``.
    With ``fd_probes`` the time-zero field is compared against the
    finite-difference oracle (one Monte Carlo solve per probe).  With
    ``coupled`` the fixed-point solver runs as well and the Lipschitz
    quotient of ``u(0, .)`` is reported against ``sqrt(2) K``.
    """
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    basis = basis or RegressionBasis("partition", n_bins=64)
    model = brownian_model(1, np.sqrt(2.0))
    grid = make_grid(0.0, T, n_steps)
    ens = sample_ensemble(grid, n_paths, 1, seed, workers=workers)
    rows = []
    for eps in eps_list:
        try:
            drv = burgers_driver(a, lam, eps)
            fp = simulate_forward(model, grid, ens, [x0], eps, workers)
            sol = solve_bsde(fp, drv, tc, basis, workers=workers)
            ymax = float(np.max(np.abs(sol.Y)))
            extra: Dict = {}
            if fd_probes is not None:
                probes = np.asarray(fd_probes, dtype=float)
                lo, hi = padded_domain(probes.min(), probes.max(), model, eps, T)
                fd = solve_pde(PdeProblem(model, drv, tc, eps, lo, hi, n_x, n_t, T))

                def mc(xs):
                    return np.array([solve_bsde(simulate_forward(model, grid, ens, [x], eps, workers), drv, tc,
                                                basis, workers=workers).y0 for x in xs])

                extra["fd_deviation"] = compare_field(mc, fd, probes).max_deviation
            if coupled:
                cgrid = grid
                cens = sample_ensemble(cgrid, coupled_paths, 1, seed + 1, workers=workers)
                cloud = np.linspace(-3.0, 3.0, coupled_paths)
                res = solve_coupled_burgers(cgrid, cens, cloud, a, lam, eps, tc,
                                            coupled_basis or RegressionBasis("poly", 8),
                                            outer_iters, tol, probes=np.linspace(-2.0, 2.0, 41), workers=workers)
                extra["lipschitz"] = res.lipschitz_quotient(np.linspace(-2.0, 2.0, 41))
                extra["coupled_converged"] = res.converged
                extra["coupled_history"] = tuple(res.history)
            rows.append(BurgersRow(float(eps), sol.y0, sol.y0_stderr, ymax, tc.M,
                                   ymax <= tc.M + 3 * sol.y0_stderr, **extra))
        except (SimulationError, RegressionError) as exc:
            nan = float("nan")
            rows.append(BurgersRow(float(eps), nan, nan, nan, tc.M, False, flagged=True, message=str(exc)))
    return BurgersReport(float(a), float(lam), rows, float(np.sqrt(2.0) * tc.lipschitz))


# --- 2-D Navier-Stokes -----------------------------------------------------------

def taylor_green(amp: float = 1.0):
    """Stream function ``amp sin x1 sin x2`` and the field ``(-d2 psi, d1 psi)`` with its Jacobian."""
    A = float(amp)

    def psi(x):
        return A * np.sin(x[:, 0]) * np.sin(x[:, 1])

    def h(x):
        s1, c1, s2, c2 = np.sin(x[:, 0]), np.cos(x[:, 0]), np.sin(x[:, 1]), np.cos(x[:, 1])
        return A * np.stack([-s1 * c2, c1 * s2], axis=1)

    def jac(x):
        s1, c1, s2, c2 = np.sin(x[:, 0]), np.cos(x[:, 0]), np.sin(x[:, 1]), np.cos(x[:, 1])
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = -c1 * c2
        out[:, 0, 1] = s1 * s2
        out[:, 1, 0] = -s1 * s2
        out[:, 1, 1] = c1 * c2
        return A * out

    return psi, h, jac


def uniform_flow(c=(0.5, -0.25)):
    """Constant field from the linear stream function ``c2 x1 - c1 x2``."""
    c = np.asarray(c, dtype=float)
    return (lambda x: c[1] * x[:, 0] - c[0] * x[:, 1],
            lambda x: np.broadcast_to(c, (x.shape[0], 2)).copy(),
            lambda x: np.zeros((x.shape[0], 2, 2)))


@dataclass(frozen=True, eq=False)
class Ns2dProblem:
    nu: float
    K: tuple
    psi: Callable
    h: Callable
    h_jac: Callable
    T: float = 0.5
    n_grid: int = 16
    domain: tuple = (0.0, 2 * np.pi)
    n_paths: int = 10000
    n_steps: int = 20
    basis: RegressionBasis = field(default_factory=lambda: RegressionBasis("poly", 4, dim=2))
    picard_iters: int = 3

    def __post_init__(self):
        if not self.nu > 0:
            raise DomainError("viscosity must be positive")
        if len(self.K) != 2:
            raise DomainError("pressure gradient K must have two components")
        if self.n_grid < 4:
            raise DomainError("n_grid must be >= 4")
        rng = np.random.default_rng(0)
        x = rng.uniform(-4, 4, (256, 2))
        e = 1e-5
        d1 = (self.psi(x + [e, 0]) - self.psi(x - [e, 0])) / (2 * e)
        d2 = (self.psi(x + [0, e]) - self.psi(x - [0, e])) / (2 * e)
        hv = self.h(x)
        err = max(np.max(np.abs(hv[:, 0] + d2)), np.max(np.abs(hv[:, 1] - d1)))
        if err > 1e-6 * (1 + np.max(np.abs(hv))):
            raise DomainError("h is not (-d2 psi, d1 psi) for the declared stream function")

    @property
    def points(self) -> np.ndarray:
        lo, hi = self.domain
        g = lo + (hi - lo) * np.arange(self.n_grid) / self.n_grid
        a, b = np.meshgrid(g, g, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)

    @property
    def spacing(self) -> float:
        return (self.domain[1] - self.domain[0]) / self.n_grid


@dataclass(frozen=True)
class Ns2dReport:
    u0: np.ndarray
    div_fd: float
    div_gradient: float
    u_residual: float
    threshold: float
    points: np.ndarray

    @property
    def flags(self) -> tuple:
        return self.div_fd <= self.threshold, self.div_gradient <= self.threshold

    @property
    def routes_agree(self) -> bool:
        """Same pass/fail verdict, and magnitudes within a factor 3 once above a third of the threshold."""
        a, b = self.div_fd, self.div_gradient
        floor = self.threshold / 3
        close = max(a, b, floor) <= 3 * max(min(a, b), floor)
        return self.flags[0] == self.flags[1] and close

    @property
    def passed(self) -> bool:
        return all(self.flags) and self.routes_agree


def run_ns2d(prob: Ns2dProblem, seed: int = 0, threshold: float = 5e-2, batch: int = 64,
             workers: int = 1) -> Ns2dReport:
    """Stacked two-component FBSDE on ``X = x + sqrt(2 nu) W`` for every grid point.

    Component ``i`` has driver ``-K_i - y_i <1, diag Z> / sqrt(2 nu)``; the
    diagonal of ``Z`` is ``sqrt(2 nu)`` times the divergence of ``u``.  All
    grid points share the noise, and since the clouds are translates of one
    another the regression design is common, so each step is one projector
    applied to many targets.  The divergence is reported by central
    differences of ``u(0, .)`` on the periodic grid and by the gradient
    equation ``U = d1 Y^1 + d2 Y^2``.
    """
    grid = make_grid(0.0, prob.T, prob.n_steps)
    ens = sample_ensemble(grid, prob.n_paths, 2, seed, workers=workers)
    W = ens.brownian()
    M, N, dt = prob.n_paths, prob.n_steps, grid.dt
    c = np.sqrt(2 * prob.nu)
    K = np.asarray(prob.K, dtype=float)
    pts = prob.points
    P = pts.shape[0]
    projs = [projector(prob.basis, pts[0] + c * W[:, i], workers=workers, step=i) for i in range(N)]

    u0 = np.empty((P, 2))
    gradu = np.empty((P, 2, 2))
    u_res = 0.0
    for lo in range(0, P, batch):
        xb = pts[lo:lo + batch]
        B = xb.shape[0]
        XT = (xb[None, :, :] + c * W[:, N, None, :]).reshape(M * B, 2)
        Y = prob.h(XT).reshape(M, B, 2)
        D = prob.h_jac(XT).reshape(M, B, 2, 2)        # [i, q] = d_q Y^i
        for i in range(N - 1, -1, -1):
            proj = projs[i]
            dw = ens.increments[:, i]
            y_cond, z = _ns_fit(proj, Y.reshape(M, -1), dw, dt)
            y_cond = y_cond.reshape(M, B, 2)
            z = z.reshape(M, 2, B, 2)                   # [noise j, point, component i]
            div = (z[:, 0, :, 0] + z[:, 1, :, 1]) / c
            d_cond, g = _ns_fit(proj, D.reshape(M, -1), dw, dt)
            d_cond = d_cond.reshape(M, B, 2, 2)
            g = g.reshape(M, 2, B, 2, 2)                # [noise j, point, component i, q]
            ddiv = (g[:, 0, :, 0, :] + g[:, 1, :, 1, :]) / c   # [point, q]
            y = y_cond.copy()
            for _ in range(prob.picard_iters):
                y = y_cond + dt * (-K - y * div[..., None])
            Dn = (d_cond - dt * y[..., :, None] * ddiv[..., None, :]) / (1 + dt * div)[..., None, None]
            Y, D = y, Dn
            U = D[..., 0, 0] + D[..., 1, 1]
            u_res = max(u_res, float(np.max(np.sqrt(np.mean(U ** 2, axis=0)))))
        u0[lo:lo + B] = Y.mean(axis=0)
        gradu[lo:lo + B] = D.mean(axis=0)

    n = prob.n_grid
    dx = prob.spacing
    uu = u0.reshape(n, n, 2)
    d1 = (np.roll(uu[..., 0], -1, axis=0) - np.roll(uu[..., 0], 1, axis=0)) / (2 * dx)
    d2 = (np.roll(uu[..., 1], -1, axis=1) - np.roll(uu[..., 1], 1, axis=1)) / (2 * dx)
    div_fd = float(np.max(np.abs(d1 + d2)))
    div_grad = float(np.max(np.abs(gradu[:, 0, 0] + gradu[:, 1, 1])))
    return Ns2dReport(u0, div_fd, div_grad, u_res, threshold, pts)


def _ns_fit(proj, targets, dw, dt):
    f = proj.fit(targets)
    cond = proj.predict(f)
    resid = targets - cond
    zt = (dw[:, :, None] * resid[:, None, :] / dt).reshape(targets.shape[0], -1)
    return cond, proj.predict(proj.fit(zt))


# --- property suites -----------------------------------------------------------

@dataclass(frozen=True)
class CaseResult:
    suite: str
    name: str
    passed: bool
    details: dict


@dataclass(frozen=True)
class ProptestReport:
    cases: List[CaseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def summary(self) -> Dict[str, tuple]:
        out: Dict[str, list] = {}
        for c in self.cases:
            out.setdefault(c.suite, [0, 0])
            out[c.suite][0] += int(c.passed)
            out[c.suite][1] += 1
        return {k: tuple(v) for k, v in out.items()}


SUITES = ("comparison", "apriori", "continuity", "truncation", "gradient")


def _random_driver(rng) -> Driver:
    kind = rng.integers(6)
    if kind == 0:
        return zero_driver()
    if kind == 1:
        return cross_linear_driver(rng.uniform(-1, 1))
    if kind == 2:
        return entropic_driver(rng.uniform(0, 0.4))
    if kind == 3:
        return drift_quadratic_driver(rng.uniform(-1, 1), rng.uniform(0, 0.2))
    if kind == 4:
        return damping_driver(rng.uniform(0, 1))
    return lipschitz_driver(rng.uniform(0, 1))


def _comparison_cases(rng, n_pairs, ens, grid, basis):
    model = brownian_model(1, 1.0)
    cases = []
    for j in range(n_pairs):
        f1 = _random_driver(rng)
        c = float(rng.choice([0.0, rng.uniform(0, 0.3)]))
        f2 = shifted(f1, c) if c > 0 else f1
        if j % 4 == 3:
            g1, g2 = rng.uniform(0, 0.2, 2)
            f1, f2 = entropic_driver(min(g1, g2)), entropic_driver(max(g1, g2))
        amp, freq, phase = rng.uniform(0.3, 1), rng.uniform(0.5, 2), rng.uniform(0, 2 * np.pi)
        s = float(rng.choice([0.0, rng.uniform(0, 0.3)]))
        t1 = cos_terminal(amp, freq, phase)
        t2 = cos_terminal(amp, freq, phase, shift=s)
        x = float(rng.uniform(-1, 1))
        fp = simulate_forward(model, grid, ens, [x], 1.0)
        s1, s2 = solve_bsde(fp, f1, t1, basis), solve_bsde(fp, f2, t2, basis)
        se = float(np.hypot(s1.y0_stderr, s2.y0_stderr))
        cases.append(CaseResult("comparison", f"pair{j}:{f1.kind}<={f2.kind},shift={s:.3f}",
                                s1.y0 <= s2.y0 + 3 * se, {"y1": s1.y0, "y2": s2.y0, "stderr": se}))
    fp = simulate_forward(model, grid, ens, [0.3], 1.0)
    drv = entropic_driver(0.2)
    lo = solve_bsde(fp, drv, cos_terminal(shift=-0.1), basis)
    hi = solve_bsde(fp, drv, cos_terminal(), basis)
    se = float(np.hypot(lo.y0_stderr, hi.y0_stderr))
    cases.append(CaseResult("comparison", "strict:xi-0.1", hi.y0 - lo.y0 > se,
                            {"y1": lo.y0, "y2": hi.y0, "stderr": se}))
    return cases


def run_proptests(suites: Sequence[str] = SUITES, seed: int = 0, n_paths: int = 20000, n_steps: int = 25,
                  n_pairs: int = 20, basis: Optional[RegressionBasis] = None) -> ProptestReport:
    """Statistical property suites for the backward solver; failures are data, not exceptions."""
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise DomainError(f"unknown suite(s) {sorted(unknown)}; known: {list(SUITES)}")
    basis = basis or RegressionBasis("poly", 6)
    grid = make_grid(0.0, 1.0, n_steps)
    ens = sample_ensemble(grid, n_paths, 1, seed)
    model = brownian_model(1, 1.0)
    rng = np.random.default_rng(seed)
    cases: List[CaseResult] = []
    heat = zero_driver()
    if "comparison" in suites:
        cases += _comparison_cases(rng, n_pairs, ens, grid, basis)
    if "apriori" in suites:
        fp = simulate_forward(model, grid, ens, [0.0], 1.0)
        drv = lipschitz_driver(0.5)
        base = solve_bsde(fp, drv, cos_terminal(), basis)
        same = solve_bsde(fp, drv, cos_terminal(), basis)
        cases.append(CaseResult("apriori", "identical-data", float(np.max(np.abs(base.Y - same.Y))) == 0.0, {}))
        consts = []
        for d in (0.1, 0.05, 0.025):
            other = solve_bsde(fp, drv, cos_terminal(shift=d), basis)
            consts.append(float(np.max(np.abs(other.Y - base.Y))) / d)
        cases.append(CaseResult("apriori", "stability-ladder", max(consts) <= 1.5 * min(consts),
                                {"constants": consts}))
    if "continuity" in suites:
        ratios = []
        y_at = {}
        for x in (1.0, 1.2, 1.1, 1.05):
            fp = simulate_forward(model, grid, ens, [x], 1.0)
            y_at[x] = solve_bsde(fp, heat, cos_terminal(), basis).y0
        for x2 in (1.2, 1.1, 1.05):
            ratios.append(abs(y_at[x2] - y_at[1.0]) / (x2 - 1.0))
        bound = float(np.exp(-0.5))
        ok = max(ratios) <= 2 * min(ratios) and max(ratios) <= 1.1 * bound
        cases.append(CaseResult("continuity", "heat-x-ratio", ok, {"ratios": ratios, "bound": bound}))
    if "truncation" in suites:
        fp = simulate_forward(model, grid, ens, [0.0], 1.0)
        for drv, b in ((cross_linear_driver(0.8), basis), (cross_quadratic_driver(1.0), RegressionBasis("partition", n_bins=64))):
            n = int(np.ceil(a_priori_bound(drv.K, 1.0, 1.0))) + 2
            plain = solve_bsde(fp, drv, cos_terminal(), b)
            trunc = solve_bsde(fp, truncate_driver(drv, make_truncation(n)), cos_terminal(), b)
            cases.append(CaseResult("truncation", f"{drv.kind}|h{n}",
                                    abs(plain.y0 - trunc.y0) <= 2 * plain.y0_stderr,
                                    {"plain": plain.y0, "truncated": trunc.y0, "stderr": plain.y0_stderr}))
    if "gradient" in suites:
        x, h = 1.0, 1e-2
        fp = simulate_forward(model, grid, ens, [x], 1.0)
        gs = solve_gradient(fp, heat, cos_terminal(), basis)
        up = solve_bsde(simulate_forward(model, grid, ens, [x + h], 1.0), heat, cos_terminal(), basis).y0
        dn = solve_bsde(simulate_forward(model, grid, ens, [x - h], 1.0), heat, cos_terminal(), basis).y0
        fd = (up - dn) / (2 * h)
        g0 = float(gs.grad_y0[0])
        exact = float(-np.exp(-0.5) * np.sin(1.0))
        cases.append(CaseResult("gradient", "vs-central-difference", abs(g0 - fd) <= 0.05 * abs(fd),
                                {"gradient": g0, "fd": fd}))
        cases.append(CaseResult("gradient", "vs-quadrature", abs(g0 - exact) <= 0.05 * abs(exact),
                                {"gradient": g0, "exact": exact}))
    return ProptestReport(cases)
