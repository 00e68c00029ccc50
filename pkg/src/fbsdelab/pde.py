"""Deterministic cross-checks for the probabilistic solvers (``m = 1``).

``solve_pde`` integrates the terminal-value problem

    du/dt + (eps/2) |sigma|^2 u_xx + b u_x + f(t, x, u, sqrt(eps) u_x sigma) = 0,
    u(T, x) = g(x),

backward in time with implicit diffusion and explicit drift and driver
(central differences, homogeneous Neumann walls).  An initial-value problem
in forward time ``tau`` maps to this form by ``t = T - tau``.

``solve_limit_ode`` integrates the noiseless limit along the deterministic
flow.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .drivers import Driver, TerminalCondition
from .errors import DomainError, SimulationError
from .forward import ForwardModel, solve_deterministic_flow
from .grid import TimeGrid


@dataclass(frozen=True, eq=False)
class PdeProblem:
    model: ForwardModel
    driver: Driver
    terminal: TerminalCondition
    epsilon: float
    x_lo: float
    x_hi: float
    n_x: int
    n_t: int
    T: float
    t0: float = 0.0

    def __post_init__(self):
        if self.model.dim_state != 1:
            raise DomainError("the finite-difference oracle is one-dimensional")
        if self.n_x < 8 or self.n_t < 1:
            raise DomainError(f"need n_x >= 8 and n_t >= 1, got n_x={self.n_x}, n_t={self.n_t}")
        if not self.x_lo < self.x_hi:
            raise DomainError("need x_lo < x_hi")
        if not self.t0 < self.T:
            raise DomainError("need t0 < T")
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n_x + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_t + 1)

    def doubled(self) -> "PdeProblem":
        """Same resolution per unit length on a domain twice as wide."""
        c, h = 0.5 * (self.x_lo + self.x_hi), self.x_hi - self.x_lo
        return PdeProblem(self.model, self.driver, self.terminal, self.epsilon,
                          c - h, c + h, 2 * self.n_x, self.n_t, self.T, self.t0)

    def refined(self) -> "PdeProblem":
        return PdeProblem(self.model, self.driver, self.terminal, self.epsilon,
                          self.x_lo, self.x_hi, 2 * self.n_x, 2 * self.n_t, self.T, self.t0)


def padded_domain(probe_lo: float, probe_hi: float, model: ForwardModel, epsilon: float, T: float,
                  n_probe: int = 257) -> tuple:
    """Probe interval widened by ``6 sqrt(eps sigma_max^2 T)`` plus drift transport ``|b|_max T``."""
    xs = np.linspace(probe_lo - 10, probe_hi + 10, n_probe)[:, None]
    ts = np.linspace(0, T, 5)
    s2 = max(float(np.max(np.sum(model.sigma(t, xs) ** 2, axis=(1, 2)))) for t in ts)
    bmax = max(float(np.max(np.abs(model.b(t, xs)))) for t in ts)
    pad = 6 * np.sqrt(epsilon * s2 * T) + bmax * T
    return probe_lo - pad, probe_hi + pad


@dataclass(frozen=True, eq=False)
class FieldGrid:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def at(self, k: int, xs) -> np.ndarray:
        """Linear interpolation of ``u(t_k, .)``."""
        return np.interp(np.asarray(xs, dtype=float), self.x, self.u[k])

    def u0(self, xs) -> np.ndarray:
        return self.at(0, xs)


def _coefficients(p: PdeProblem, t, x):
    xc = x[:, None]
    b = p.model.b(t, xc)[:, 0]
    sig = p.model.sigma(t, xc)[:, 0, :]
    D = 0.5 * p.epsilon * np.sum(sig ** 2, axis=1)
    return b, sig, D


def _check_stability(p: PdeProblem, k, dt, dx, vel, D):
    cfl = dt * np.max(np.abs(vel)) / dx
    if cfl > 1 + 1e-12:
        raise SimulationError(f"explicit transport CFL {cfl:.3g} > 1 at time step {k}", step=k)
    moving = np.abs(vel) > 0
    if np.any(moving & (D <= 0)):
        raise SimulationError(f"transport without diffusion at time step {k}; central differences are unstable",
                              step=k)
    if moving.any():
        ratio = np.max(dt * vel[moving] ** 2 / (2 * D[moving]))
        if ratio > 1 + 1e-12:
            raise SimulationError(f"explicit transport/diffusion ratio {ratio:.3g} > 1 at time step {k}", step=k)


def solve_pde(p: PdeProblem) -> FieldGrid:
    """Semi-implicit backward time stepping; refuses unstable resolutions."""
    x, t = p.x, p.t
    n = x.size
    dx = x[1] - x[0]
    dt = t[1] - t[0]
    U = np.empty((p.n_t + 1, n))
    U[-1] = p.terminal.g(x[:, None])
    drv = p.driver
    root_eps = np.sqrt(p.epsilon)
    for k in range(p.n_t, 0, -1):
        u = U[k]
        b, sig, _ = _coefficients(p, t[k], x)
        ux = np.empty(n)
        ux[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
        ux[0] = ux[-1] = 0.0
        z = root_eps * ux[:, None] * sig
        f = drv.f(t[k], x[:, None], u, z)
        _, _, D_new = _coefficients(p, t[k - 1], x)
        vel = b.copy()
        if drv.dz is not None:
            # the z-dependence of f acts as extra transport with this velocity
            vel = vel + root_eps * np.sum(drv.dz(t[k], x[:, None], u, z) * sig, axis=1)
        if drv.dy is not None:
            fy = np.max(np.abs(drv.dy(t[k], x[:, None], u, z)))
            if dt * fy > 1 + 1e-12:
                raise SimulationError(f"explicit reaction step dt*|f_y| = {dt * fy:.3g} > 1 at time step {k}",
                                      step=k)
        _check_stability(p, k, dt, dx, vel, D_new)
        rhs = u + dt * (b * ux + f)
        r = dt * D_new / dx ** 2
        ab = np.zeros((3, n))
        ab[1] = 1 + 2 * r
        ab[0, 1:] = -r[:-1]
        ab[2, :-1] = -r[1:]
        # Neumann ghost nodes u_{-1} = u_1, u_{n} = u_{n-2}
        ab[0, 1] = -2 * r[0]
        ab[2, -2] = -2 * r[-1]
        new = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(new)):
            raise SimulationError(f"non-finite field at time step {k - 1}", step=k - 1)
        U[k - 1] = new
    return FieldGrid(t, x, U)


def solve_limit_ode(model: ForwardModel, drv: Driver, tc: TerminalCondition, grid: TimeGrid, x0) -> np.ndarray:
    """``Y^0`` on ``grid`` for ``dY^0/ds = -f(s, X^0_s, Y^0_s, 0)``, ``Y^0_T = g(X^0_T)``.

    The flow is computed by RK4 on the twice-refined grid so midpoints are
    available to the backward RK4 sweep.  A 2-D ``x0`` of shape ``(P, m)``
    returns ``(P, n_steps+1)``.
    """
    x0 = np.asarray(x0, dtype=float)
    batched = x0.ndim == 2
    xs = np.atleast_2d(x0)
    if xs.shape[1] != model.dim_state:
        raise DomainError(f"x0 has dimension {xs.shape[1]}, model expects {model.dim_state}")
    fine = solve_deterministic_flow(model, grid.refine(2), xs)
    N, h = grid.n_steps, grid.dt
    tt = np.linspace(grid.t0, grid.T, 2 * N + 1)
    tt[-1] = grid.T
    d = model.dim_noise
    P = xs.shape[0]
    zero = np.zeros((P, d))
    Y = np.empty((P, N + 1))
    Y[:, N] = tc.g(fine[:, -1])

    def f(k, y):
        return drv.f(tt[k], fine[:, k], y, zero)

    for i in range(N - 1, -1, -1):
        y = Y[:, i + 1]
        k1 = f(2 * i + 2, y)
        k2 = f(2 * i + 1, y + h / 2 * k1)
        k3 = f(2 * i + 1, y + h / 2 * k2)
        k4 = f(2 * i, y + h * k3)
        Y[:, i] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Y[:, i])):
            raise SimulationError(f"non-finite limit value at step {i}", step=i)
    return Y if batched else Y[0]


def limit_field(model: ForwardModel, drv: Driver, tc: TerminalCondition, grid: TimeGrid) -> Callable:
    """``u0(i, x)``: the noiseless decoupling field at grid time ``t_i``.

    ``x`` may be ``(P, m)`` or, for ``m = 1``, a flat array of points.
    """
    N = grid.n_steps

    def u0(i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pts = x[:, None] if x.ndim == 1 else x
        if i == N:
            return tc.g(pts)
        sub = TimeGrid(float(grid.times[i]), grid.T, N - i)
        return solve_limit_ode(model, drv, tc, sub, pts)[:, 0]

    return u0


@dataclass(frozen=True)
class FieldComparison:
    max_deviation: float
    table: list


def compare_field(mc, fd: FieldGrid, probes: Sequence[float]) -> FieldComparison:
    """Max ``|u_MC(0, x) - u_FD(0, x)|`` over ``probes`` plus the per-point rows.

    ``mc`` is a callable mapping an array of points to values, or any object
    with a ``u(i, x)`` method (an :class:`~fbsdelab.bsde.FbsdeSolution`).
    """
    xs = np.asarray(probes, dtype=float)
    if np.any(xs <= fd.x[0]) or np.any(xs >= fd.x[-1]):
        raise DomainError("probe points must be interior to the finite-difference domain")
    if hasattr(mc, "u"):
        vm = np.asarray(mc.u(0, xs[:, None]), dtype=float)
    else:
        vm = np.asarray(mc(xs), dtype=float)
    vf = fd.u0(xs)
    dev = np.abs(vm - vf)
    rows = [(float(a), float(b), float(c), float(e)) for a, b, c, e in zip(xs, vm, vf, dev)]
    return FieldComparison(float(dev.max()), rows)


def grid_function(fg: FieldGrid) -> Callable:
    """Wrap a field grid as ``u(t_index, xs)`` for code expecting a decoupling field."""
    return lambda k, xs: fg.at(k, np.ravel(xs))
