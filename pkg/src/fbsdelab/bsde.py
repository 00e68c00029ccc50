"""Backward regression Monte Carlo for decoupled FBSDEs.

The backward recursion on forward paths ``X`` is

    Y_N = g(X_N)
    Z_i = E[Y_{i+1} dW_i / dt | X_i]
    Y_i = E[Y_{i+1} | X_i] + f(t_i, X_i, Y_i, Z_i) dt

with conditional expectations replaced by least-squares regression on
``basis(X_i)`` and the implicit ``Y_i`` resolved by a few Picard passes.
``Y`` is clamped at the a-priori bound ``e^{KT}(M + KT)`` and ``|Z|`` at
``c_Z sqrt(log M)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .drivers import Driver, LinearizingTransform, TerminalCondition, a_priori_bound, damping_driver
from .errors import DomainError, SimulationError
from .forward import ForwardPaths, brownian_model, euler_paths
from .grid import PathEnsemble, TimeGrid
from .regression import FittedField, RegressionBasis, fit, projector

CLAMP_WARN_FRACTION = 0.10


@dataclass(frozen=True)
class ClampReport:
    y_bound: float
    z_bound: float
    y_fraction: float
    z_fraction: float

    @property
    def warning(self) -> bool:
        return max(self.y_fraction, self.z_fraction) > CLAMP_WARN_FRACTION


@dataclass(frozen=True, eq=False)
class FbsdeSolution:
    forward: ForwardPaths
    Y: np.ndarray
    Z: np.ndarray
    fields: List[FittedField]
    terminal: TerminalCondition
    clamp: ClampReport
    y0_stderr: float
    evaluator: Callable = field(repr=False)

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def z0(self) -> np.ndarray:
        return self.Z[:, 0].mean(axis=0)

    def u(self, i: int, x) -> np.ndarray:
        """Decoupling field ``u(t_i, x)`` rebuilt from the stored regression."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if i == self.Y.shape[1] - 1:
            return self.terminal.g(x)
        return self.evaluator(i, x)[0]

    def v(self, i: int, x) -> np.ndarray:
        """``Z`` field ``v(t_i, x)``, shape ``(P, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.evaluator(i, x)[1]

    def h2_norm(self) -> float:
        """Monte Carlo ``(E sum_i |Z_i|^2 dt)^(1/2)``."""
        dt = self.forward.grid.dt
        return float(np.sqrt(np.mean(np.sum(self.Z ** 2, axis=(1, 2)) * dt)))


def _clip_norm(z, bound):
    n = np.linalg.norm(z, axis=-1)
    over = n > bound
    if over.any():
        z = z.copy()
        z[over] *= (bound / n[over])[:, None]
    return z, int(over.sum())


def _step_fit(basis, x, nxt, dw, dt, workers, step):
    """Fit ``E[nxt | x]`` and ``E[nxt dW / dt | x]`` on one shared design.

    The second regression uses the centred target ``(nxt - E[nxt | x]) dW/dt``,
    which has the same conditional mean but far smaller variance.  Returns a
    combined field whose columns are ``[cond (k), z (d*k)]`` and its values on
    the cloud.
    """
    proj = projector(basis, x, workers=workers, step=step)
    nxt2 = nxt.reshape(nxt.shape[0], -1)
    cf = proj.fit(nxt2)
    cond = proj.predict(cf)
    resid = nxt2 - cond
    target = (dw[:, :, None] * resid[:, None, :] / dt).reshape(nxt2.shape[0], -1)
    zf = proj.fit(target)
    coef = np.concatenate([cf.coef, zf.coef], axis=1)
    combined = FittedField(cf.basis, cf.center, cf.scale, cf.active, coef, cf.edges,
                           None if cf.fallback is None else np.concatenate([cf.fallback, zf.fallback]))
    return combined, np.concatenate([cond, proj.predict(zf)], axis=1)


def z_clamp_level(n_paths: int, c_z: float = 5.0) -> float:
    return float(c_z * np.sqrt(np.log(max(n_paths, 3))))


def solve_bsde(forward: ForwardPaths, drv: Driver, tc: TerminalCondition, basis: RegressionBasis,
               picard_iters: int = 3, c_z: float = 5.0, y_bound: Optional[float] = None,
               workers: int = 1) -> FbsdeSolution:
    """Regression Monte Carlo solve of ``BSDE(g(X_T), f)`` on ``forward``."""
    if picard_iters < 1:
        raise DomainError("picard_iters must be >= 1")
    X, dW = forward.states, forward.increments
    grid = forward.grid
    M, N, dt = X.shape[0], grid.n_steps, grid.dt
    d = dW.shape[2]
    t = grid.times
    yb = a_priori_bound(drv.K, tc.M, grid.horizon) if y_bound is None else float(y_bound)
    zb = z_clamp_level(M, c_z)

    Y = np.empty((M, N + 1))
    Z = np.empty((M, N, d))
    Y[:, N] = tc.g(X[:, N])
    fields: List[FittedField] = [None] * N
    y_hits = z_hits = 0

    def resolve(i, x, pred):
        cond, z = pred[:, 0], pred[:, 1:]
        z, zc = _clip_norm(z, zb)
        y = cond + drv.f(t[i], x, cond, z) * dt
        step = np.abs(y - cond)
        live = np.ones(y.shape, dtype=bool)
        for _ in range(picard_iters - 1):
            # a pass is kept only where it still contracts; where |f_y| dt > 1
            # (far cloud tails) the explicit value is the stable choice
            nxt = cond + drv.f(t[i], x, y, z) * dt
            inc = np.abs(nxt - y)
            live &= inc <= step
            y = np.where(live, nxt, y)
            step = np.where(live, inc, step)
        yc = np.clip(y, -yb, yb)
        return yc, z, int(np.count_nonzero(yc != y)), zc

    for i in range(N - 1, -1, -1):
        xi = X[:, i]
        nxt = Y[:, i + 1]
        fld, pred = _step_fit(basis, xi, nxt, dW[:, i], dt, workers, i)
        fields[i] = fld
        y, z, yh, zh = resolve(i, xi, pred)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise SimulationError(f"non-finite backward values at step {i}", step=i)
        Y[:, i], Z[:, i] = y, z
        y_hits += yh
        z_hits += zh

    # pathwise g(X_T) + sum f dt has mean Y_0; its spread is the honest MC error
    acc = Y[:, N].copy()
    for i in range(N):
        acc += drv.f(t[i], X[:, i], Y[:, i], Z[:, i]) * dt
    stderr = float(np.std(acc) / np.sqrt(M))
    clamp = ClampReport(yb, zb, y_hits / (M * N), z_hits / (M * N))
    if clamp.warning:
        warnings.warn(f"clamp activation above {CLAMP_WARN_FRACTION:.0%}: y={clamp.y_fraction:.3f}, "
                      f"z={clamp.z_fraction:.3f}; check basis or clamp settings", RuntimeWarning)

    def evaluator(i, x):
        y, z, _, _ = resolve(i, x, fields[i].predict(x))
        return y, z

    return FbsdeSolution(forward, Y, Z, fields, tc, clamp, stderr, evaluator)


def solve_by_transform(forward: ForwardPaths, lin: LinearizingTransform, tc: TerminalCondition,
                       basis: RegressionBasis, workers: int = 1) -> FbsdeSolution:
    """Solve ``BSDE(g(X_T), g_coef(y)|z|^2)`` through ``P = Phi(Y)``, a martingale.

    No driver is evaluated: ``P_i = E[Phi(g(X_T)) | X_i]`` by backward
    regression, ``Y_i = Phi^{-1}(P_i)`` and ``Z_i = Q_i / Phi'(Y_i)`` with
    ``Q_i = E[P_{i+1} dW_i / dt | X_i]``.
    """
    X, dW = forward.states, forward.increments
    grid = forward.grid
    M, N, dt = X.shape[0], grid.n_steps, grid.dt
    d = dW.shape[2]
    P = np.empty((M, N + 1))
    Y = np.empty((M, N + 1))
    Z = np.empty((M, N, d))
    Y[:, N] = tc.g(X[:, N])
    P[:, N] = lin(Y[:, N])
    # P is a martingale, so every conditional mean lies in the terminal range;
    # projecting onto it removes polynomial overshoot in the cloud tails
    p_lo, p_hi = float(P[:, N].min()), float(P[:, N].max())
    hits = 0
    fields: List[FittedField] = [None] * N
    for i in range(N - 1, -1, -1):
        xi = X[:, i]
        nxt = P[:, i + 1]
        fld, pred = _step_fit(basis, xi, nxt, dW[:, i], dt, workers, i)
        fields[i] = fld
        P[:, i] = np.clip(pred[:, 0], p_lo, p_hi)
        hits += int(np.count_nonzero(P[:, i] != pred[:, 0]))
        Y[:, i] = lin.inverse(P[:, i])
        Z[:, i] = pred[:, 1:] / lin.derivative(Y[:, i])[:, None]
    # delta method through Phi^{-1}
    stderr = float(np.std(P[:, N]) / np.sqrt(M) / lin.derivative(np.array([np.mean(Y[:, 0])]))[0])
    clamp = ClampReport(lin.y_max, np.inf, hits / (M * N), 0.0)

    def evaluator(i, x):
        pred = fields[i].predict(x)
        y = lin.inverse(np.clip(pred[:, 0], p_lo, p_hi))
        return y, pred[:, 1:] / lin.derivative(y)[:, None]

    return FbsdeSolution(forward, Y, Z, fields, tc, clamp, stderr, evaluator)


BMO_BINS = 32


def bmo_profile(sol: FbsdeSolution, basis: Optional[RegressionBasis] = None, workers: int = 1) -> np.ndarray:
    """Per grid time, the cloud maximum of the regressed ``E[sum_{l>=i} |Z_l|^2 dt | X_i]``.

    The default basis is a partition (local means).  A cloud maximum of a
    global polynomial fit is dominated by extrapolation in the sparse tails,
    while local means of a nonnegative target stay inside its range.
    """
    X = sol.forward.states
    if basis is None:
        basis = RegressionBasis("partition", n_bins=BMO_BINS, dim=X.shape[2])
    dt = sol.forward.grid.dt
    sq = np.sum(sol.Z ** 2, axis=2) * dt
    tail = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
    out = np.empty(sq.shape[1])
    for i in range(sq.shape[1]):
        fld = fit(basis, X[:, i], tail[:, i], workers=workers, step=i)
        out[i] = float(np.max(fld.predict(X[:, i])))
    return np.maximum(out, 0.0)


def estimate_bmo_norm(sol: FbsdeSolution, basis: Optional[RegressionBasis] = None, workers: int = 1) -> float:
    """Grid proxy for the squared BMO norm of ``Z * W``."""
    if not np.any(sol.Z):
        return 0.0
    return float(np.max(bmo_profile(sol, basis, workers)))


@dataclass(frozen=True, eq=False)
class GradientSolution:
    nablaX: np.ndarray
    nablaY: np.ndarray
    nablaZ: np.ndarray

    @property
    def grad_y0(self) -> np.ndarray:
        return self.nablaY[:, 0].mean(axis=0)

    @property
    def grad_y0_stderr(self) -> np.ndarray:
        return self.nablaY[:, 1].std(axis=0) / np.sqrt(self.nablaY.shape[0])


def solve_gradient(forward: ForwardPaths, drv: Driver, tc: TerminalCondition, basis: RegressionBasis,
                   base: Optional[FbsdeSolution] = None, picard_iters: int = 3,
                   workers: int = 1) -> GradientSolution:
    """Solve the differentiated FBSDE for ``(grad X, grad Y, grad Z)``.

    Writes ``grad Y_i = D_i grad X_i`` and ``grad Z_i = G_i grad X_i`` so the
    regressions only involve functions of ``X_i``; the linear backward step
    for ``D_i`` is solved exactly, with driver derivatives frozen at the base
    solution.
    """
    if not drv.has_derivatives:
        raise DomainError("solve_gradient needs a driver with dy and dz oracles")
    if tc.grad is None:
        raise DomainError("solve_gradient needs a terminal condition with a gradient")
    if base is None:
        base = solve_bsde(forward, drv, tc, basis, picard_iters, workers=workers)
    model = forward.model
    X, dW = forward.states, forward.increments
    grid = forward.grid
    M, N, dt = X.shape[0], grid.n_steps, grid.dt
    m, d = X.shape[2], dW.shape[2]
    t = grid.times
    root_eps = np.sqrt(forward.epsilon)

    A = np.empty((M, N, m, m))
    nX = np.empty((M, N + 1, m, m))
    nX[:, 0] = np.eye(m)
    for i in range(N):
        step = np.eye(m) + model.b_jac(t[i], X[:, i]) * dt
        if root_eps:
            step = step + root_eps * np.einsum("pajq,pj->paq", model.sigma_jac(t[i], X[:, i]), dW[:, i])
        A[:, i] = step
        nX[:, i + 1] = np.einsum("pab,pbc->pac", step, nX[:, i])

    D = np.empty((M, N + 1, m))
    G = np.empty((M, N, d, m))
    D[:, N] = tc.grad(X[:, N])
    for i in range(N - 1, -1, -1):
        xi = X[:, i]
        B = np.einsum("pa,paq->pq", D[:, i + 1], A[:, i])
        pred = _step_fit(basis, xi, B, dW[:, i], dt, workers, i)[1]
        E, Gi = pred[:, :m], pred[:, m:].reshape(M, d, m)
        y, z = base.Y[:, i], base.Z[:, i]
        fx = drv.dx(t[i], xi, y, z) if drv.dx is not None else np.zeros((M, m))
        fy = drv.dy(t[i], xi, y, z)
        fz = drv.dz(t[i], xi, y, z)
        rhs = E + dt * (fx + np.einsum("pd,pdm->pm", fz, Gi))
        D[:, i] = rhs / (1.0 - dt * fy)[:, None]
        G[:, i] = Gi
    nY = np.einsum("pia,piaq->piq", D, nX)
    nZ = np.einsum("pidm,pimq->pidq", G, nX[:, :N])
    return GradientSolution(nX, nY, nZ)


# --- coupled Burgers ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoupledResult:
    solution: FbsdeSolution
    history: List[float]
    converged: bool
    iterations: int
    field: Callable

    def lipschitz_quotient(self, xs, i: int = 0) -> float:
        """Largest ``|u(t_i, x) - u(t_i, x')| / |x - x'|`` over neighbouring probes."""
        xs = np.sort(np.asarray(xs, dtype=float))
        u = self.field(i, xs[:, None])
        return float(np.max(np.abs(np.diff(u)) / np.diff(xs)))


def solve_coupled_burgers(grid: TimeGrid, ens: PathEnsemble, x0_cloud, a: float, lam: float,
                          epsilon: float, tc: TerminalCondition, basis: RegressionBasis,
                          outer_iters: int = 10, tol: float = 1e-3, probes=None,
                          picard_iters: int = 3, workers: int = 1) -> CoupledResult:
    """Fixed point for ``dX = -a u(t, X) dt + sqrt(2 eps) dW`` with ``dY = lam Y dt + Z dW``.

    Starts from ``u^0 = g``.  Each sweep simulates the forward cloud with the
    previous field in the drift (same noise every sweep), solves the linear
    backward equation and refits ``u``.  The field is clipped at ``sup|g|``,
    the uniform bound of the exact solution, before entering the drift.
    Non-convergence is reported through ``converged``, never raised.
    """
    if outer_iters < 1:
        raise DomainError("outer_iters must be >= 1")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    cloud = np.asarray(x0_cloud, dtype=float).reshape(ens.n_paths, 1)
    if probes is None:
        probes = np.linspace(cloud.min(), cloud.max(), 41)
    probes = np.asarray(probes, dtype=float).reshape(-1, 1)
    model = brownian_model(1, np.sqrt(2.0))
    drv = damping_driver(lam)
    N = grid.n_steps
    bound = tc.M
    scale = float(np.sqrt(epsilon))

    def terminal_field(i, x):
        return tc.g(x)

    prev = terminal_field
    history: List[float] = []
    sol = None
    for _ in range(outer_iters):
        times_idx = {float(tt): k for k, tt in enumerate(grid.times)}
        u_prev = prev

        def drift(tt, x, u_prev=u_prev):
            return -a * np.clip(u_prev(times_idx[float(tt)], x), -bound, bound)[:, None]

        states = euler_paths(drift, model.sigma, grid, ens.increments, cloud, scale)
        fp = ForwardPaths(model, grid, ens, float(epsilon), cloud, states)
        sol = solve_bsde(fp, drv, tc, basis, picard_iters, workers=workers)
        new = sol.u
        change = max(float(np.max(np.abs(new(i, probes) - prev(i, probes)))) for i in range(N + 1))
        history.append(change)
        prev = new
        if change <= tol:
            break
    converged = history[-1] <= tol
    return CoupledResult(sol, history, converged, len(history), prev)
