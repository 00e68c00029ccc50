"""Small-noise large deviations: discrete actions, rate minimization, empirics.

Paths are piecewise linear on ``n_nodes`` equal segments of ``[t0, T]``.  The
action of a path is the midpoint rule for

    1/2 int <phi' - b(phi), (sigma sigma^T)^{-1}(phi) (phi' - b(phi))> ds.

Events are handled by exact elimination rather than penalties: the optimum
for an endpoint or hitting event sits on the boundary of the target set, so
every problem reduces to a family of pinned-endpoint minimizations, one per
boundary manifold (and, for hitting events, per hitting node).  When
``sigma sigma^T`` is not certified invertible the control formulation is
used instead, with a penalty continuation for the constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize

from ._parallel import chunk_bounds
from .errors import DomainError
from .forward import ForwardModel, euler_paths
from .grid import PathEnsemble, TimeGrid

MIN_EIG = 1e-8


# --- events -----------------------------------------------------------------

@dataclass(frozen=True)
class Everywhere:
    """The whole path space."""

    def hit(self, paths) -> np.ndarray:
        return np.ones(np.asarray(paths).shape[0], dtype=bool)


@dataclass(frozen=True)
class TerminalHalfspace:
    """``<normal, phi_T> >= level``."""

    normal: tuple
    level: float

    def hit(self, paths) -> np.ndarray:
        return np.asarray(paths)[:, -1] @ np.asarray(self.normal, dtype=float) >= self.level


@dataclass(frozen=True)
class EndpointBall:
    """``|phi_T - center| <= radius``; radius 0 pins the endpoint."""

    center: tuple
    radius: float = 0.0

    def hit(self, paths) -> np.ndarray:
        d = np.asarray(paths)[:, -1] - np.asarray(self.center, dtype=float)
        return np.linalg.norm(d, axis=-1) <= self.radius


@dataclass(frozen=True)
class SupExit:
    """Leaving a region at some monitored time.

    ``kind="halfspace"``: ``max_s <normal, phi_s> >= level``.
    ``kind="tube"``: ``max_s |phi_s - center| >= radius``.
    """

    kind: str
    level: float = 1.0
    normal: Optional[tuple] = None
    center: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("halfspace", "tube"):
            raise DomainError(f"unknown exit kind {self.kind!r}")
        if self.kind == "halfspace" and self.normal is None:
            raise DomainError("a halfspace exit needs a normal")
        if self.kind == "tube" and not self.level > 0:
            raise DomainError("a tube exit needs a positive radius")

    def values(self, paths, start) -> np.ndarray:
        paths = np.asarray(paths)
        if self.kind == "halfspace":
            return paths @ np.asarray(self.normal, dtype=float)
        c = np.asarray(self.center if self.center is not None else start, dtype=float)
        return np.linalg.norm(paths - c, axis=-1)

    def hit(self, paths, start=None) -> np.ndarray:
        paths = np.asarray(paths)
        if start is None:
            start = paths[0, 0]
        return np.max(self.values(paths, start), axis=1) >= self.level


def sup_exit(level: float, normal=(1.0,)) -> SupExit:
    return SupExit("halfspace", float(level), tuple(float(v) for v in normal))


def tube_exit(radius: float, center=None) -> SupExit:
    return SupExit("tube", float(radius), None, None if center is None else tuple(center))


# --- problems -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActionProblem:
    model: ForwardModel
    x: np.ndarray
    T: float
    event: object = field(default_factory=Everywhere)
    n_nodes: int = 64
    t0: float = 0.0
    formulation: str = ""

    def __post_init__(self):
        if not self.model.time_homogeneous:
            raise DomainError("the LDP machinery needs time-homogeneous coefficients")
        if not self.model.bounded:
            raise DomainError("the LDP machinery needs bounded coefficients (model.bounded)")
        if not self.t0 < self.T or self.n_nodes < 1:
            raise DomainError("need t0 < T and n_nodes >= 1")
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.shape != (self.model.dim_state,):
            raise DomainError(f"start point must have shape ({self.model.dim_state},)")
        object.__setattr__(self, "x", x)
        if self.formulation not in ("", "qstar", "control"):
            raise DomainError(f"unknown formulation {self.formulation!r}")
        if not self.formulation:
            object.__setattr__(self, "formulation", "qstar" if _certify(self) else "control")

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_nodes

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_nodes + 1)

    def with_event(self, event) -> "ActionProblem":
        return ActionProblem(self.model, self.x, self.T, event, self.n_nodes, self.t0, self.formulation)

    def with_nodes(self, n_nodes: int) -> "ActionProblem":
        return ActionProblem(self.model, self.x, self.T, self.event, n_nodes, self.t0, self.formulation)


def _certify(p: ActionProblem, n: int = 256, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    m = p.model.dim_state
    cloud = p.x + rng.standard_normal((n, m)) * (1 + np.sqrt(p.T - p.t0)) * 3
    s = p.model.sigma(p.t0, cloud)
    eig = np.linalg.eigvalsh(np.einsum("pij,pkj->pik", s, s))
    return bool(eig.min() >= MIN_EIG)


@dataclass(frozen=True, eq=False)
class RateValue:
    value: float
    path: Optional[np.ndarray]
    times: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0
    hit_node: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return bool(np.isfinite(self.value))


# --- action and gradient -------------------------------------------------------

def _segments(p: ActionProblem, path):
    h = (p.T - p.t0) / (path.shape[0] - 1)
    v = np.diff(path, axis=0) / h
    mid = 0.5 * (path[1:] + path[:-1])
    return h, v, mid


def _action_terms(p: ActionProblem, path, want_grad: bool):
    h, v, mid = _segments(p, path)
    model = p.model
    s = model.sigma(p.t0, mid)
    A = np.einsum("pij,pkj->pik", s, s)
    if np.linalg.eigvalsh(A).min() < MIN_EIG:
        return np.inf, None, False
    r = v - model.b(p.t0, mid)
    w = np.linalg.solve(A, r[..., None])[..., 0]
    val = 0.5 * h * float(np.sum(r * w))
    if not want_grad:
        return val, None, True
    jb = model.b_jac(p.t0, mid)
    js = model.sigma_jac(p.t0, mid)
    stw = np.einsum("paj,pa->pj", s, w)
    quad = 2.0 * np.einsum("pj,pajq,pa->pq", stw, js, w)
    g_mid = -h * np.einsum("piq,pi->pq", jb, w) - 0.5 * h * quad
    grad = np.zeros_like(path)
    grad[1:] += w + 0.5 * g_mid
    grad[:-1] += -w + 0.5 * g_mid
    return val, grad, True


def action(problem: ActionProblem, path) -> float:
    """Discrete action of ``path`` (shape ``(K+1, m)`` or ``(K+1,)`` for ``m = 1``).

    Returns ``inf`` when ``sigma sigma^T`` is singular at some midpoint, the
    ``inf of the empty set`` convention; see :func:`action_details` for the flag.
    """
    return action_details(problem, path)[0]


def action_details(problem: ActionProblem, path):
    """``(value, gradient, invertible)``; the gradient is w.r.t. every node."""
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    if path.shape[1] != problem.model.dim_state or path.shape[0] < 2:
        raise DomainError("path must be (K+1, m) with K >= 1")
    if not np.allclose(path[0], problem.x, rtol=0, atol=1e-12):
        raise DomainError("path must start at the problem's start point")
    return _action_terms(problem, path, True)


def discrete_flow(problem: ActionProblem, start=None, n_steps: Optional[int] = None, iters: int = 50) -> np.ndarray:
    """Implicit-midpoint flow ``phi_{k+1} = phi_k + h b((phi_k + phi_{k+1})/2)``.

    This is the exact zero set of the discrete action.
    """
    x = problem.x if start is None else np.asarray(start, dtype=float)
    n = problem.n_nodes if n_steps is None else n_steps
    h = problem.h
    out = np.empty((n + 1, x.size))
    out[0] = x
    for k in range(n):
        cur = out[k]
        nxt = cur + h * problem.model.b(problem.t0, cur[None])[0]
        for _ in range(iters):
            new = cur + h * problem.model.b(problem.t0, (0.5 * (cur + nxt))[None])[0]
            done = np.max(np.abs(new - nxt)) <= 1e-15 * (1 + np.max(np.abs(new)))
            nxt = new
            if done:
                break
        out[k + 1] = nxt
    return out


# --- pinned minimization ----------------------------------------------------------

@dataclass(frozen=True)
class _Pin:
    """Endpoint manifold: a point, a hyperplane or a sphere."""

    kind: str
    a: np.ndarray
    c: float = 0.0

    @property
    def dim(self) -> int:
        return 0 if self.kind == "point" else self.a.size

    def map(self, e):
        if self.kind == "point":
            return self.a
        if self.kind == "plane":
            n = self.a
            return e - (e @ n - self.c) / (n @ n) * n
        u = e / np.linalg.norm(e)
        return self.a + self.c * u

    def pullback(self, e, g):
        if self.kind == "point":
            return np.zeros(0)
        if self.kind == "plane":
            n = self.a
            return g - (g @ n) / (n @ n) * n
        ne = np.linalg.norm(e)
        u = e / ne
        return self.c * (g - (g @ u) * u) / ne

    def seed(self, y):
        if self.kind == "plane":
            return self.map(np.asarray(y, dtype=float))
        if self.kind == "sphere":
            d = np.asarray(y, dtype=float) - self.a
            return d if np.linalg.norm(d) > 0 else np.eye(self.a.size)[0]
        return np.zeros(0)


def _minimize_pinned(p: ActionProblem, k: int, pin: _Pin, restarts: int, seed: int,
                     gtol: float = 1e-12):
    """Minimize the action over paths on nodes ``0..k`` whose node ``k`` lies on ``pin``."""
    m = p.model.dim_state
    flow = discrete_flow(p, n_steps=k)
    sub = ActionProblem(p.model, p.x, p.t0 + k * p.h, Everywhere(), k, p.t0, "qstar")
    nin = (k - 1) * m

    def unpack(theta):
        e = theta[nin:]
        end = pin.map(e)
        path = np.empty((k + 1, m))
        path[0] = p.x
        path[1:k] = theta[:nin].reshape(k - 1, m)
        path[k] = end
        return path, e

    def fun(theta):
        path, e = unpack(theta)
        val, grad, ok = _action_terms(sub, path, True)
        if not ok:
            return 1e300, np.zeros_like(theta)
        g = np.concatenate([grad[1:k].ravel(), pin.pullback(e, grad[k])])
        return val, g

    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(restarts, 1)):
        e0 = pin.seed(flow[-1] if r == 0 else flow[-1] + rng.standard_normal(m))
        end0 = pin.map(e0)
        lam = np.linspace(0, 1, k + 1)[:, None]
        blend = flow + lam * (end0 - flow[-1])
        if r > 0:
            bump = np.sin(np.pi * lam) * rng.standard_normal(m) * 0.5
            blend = blend + bump
        theta0 = np.concatenate([blend[1:k].ravel(), e0])
        if theta0.size == 0:
            val = _action_terms(sub, unpack(theta0)[0], False)[0]
            res = type("R", (), {"x": theta0, "fun": val, "nit": 0, "jac": np.zeros(0)})
        else:
            res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                           options={"maxiter": 5000, "gtol": gtol, "ftol": 1e-15, "maxcor": 30})
        if best is None or res.fun < best.fun:
            best = res
    path, _ = unpack(best.x)
    gn = float(np.max(np.abs(best.jac))) if np.size(best.jac) else 0.0
    return float(best.fun), path, int(best.nit), gn


def _complete(p: ActionProblem, head):
    """Extend a path ending at node ``k`` by the zero-cost flow up to ``T``."""
    k = head.shape[0] - 1
    if k == p.n_nodes:
        return head
    tail = discrete_flow(p, start=head[-1], n_steps=p.n_nodes - k)
    return np.concatenate([head, tail[1:]], axis=0)


def _pins_for(event, p: ActionProblem) -> List[_Pin]:
    m = p.model.dim_state
    if isinstance(event, TerminalHalfspace):
        n = np.atleast_1d(np.asarray(event.normal, dtype=float))
        if m == 1:
            return [_Pin("point", np.array([event.level / n[0]]))]
        return [_Pin("plane", n, float(event.level))]
    if isinstance(event, EndpointBall):
        c = np.atleast_1d(np.asarray(event.center, dtype=float))
        if event.radius == 0:
            return [_Pin("point", c)]
        if m == 1:
            return [_Pin("point", c - event.radius), _Pin("point", c + event.radius)]
        return [_Pin("sphere", c, float(event.radius))]
    if isinstance(event, SupExit):
        if event.kind == "halfspace":
            n = np.atleast_1d(np.asarray(event.normal, dtype=float))
            if m == 1:
                return [_Pin("point", np.array([event.level / n[0]]))]
            return [_Pin("plane", n, float(event.level))]
        c = p.x if event.center is None else np.atleast_1d(np.asarray(event.center, dtype=float))
        if m == 1:
            return [_Pin("point", c - event.level), _Pin("point", c + event.level)]
        return [_Pin("sphere", c, float(event.level))]
    raise DomainError(f"unsupported event {type(event).__name__} for rate minimization")


def _flow_hits(event, p: ActionProblem, flow) -> bool:
    if isinstance(event, Everywhere):
        return True
    if isinstance(event, SupExit):
        return bool(event.hit(flow[None], p.x)[0])
    return bool(event.hit(flow[None])[0])


def minimize_rate(problem: ActionProblem, restarts: int = 3, seed: int = 0) -> RateValue:
    """Minimal discrete action over paths in ``problem.event``.

    Returns ``value = inf`` with diagnostics when no restart is feasible.
    """
    p = problem
    times = p.times
    flow = discrete_flow(p)
    if _flow_hits(p.event, p, flow):
        return RateValue(0.0, flow, times, 0, 0.0, None, {"reason": "deterministic flow lies in the event"})
    if p.formulation == "control":
        return _minimize_control(p, restarts, seed)
    pins = _pins_for(p.event, p)
    nodes = range(1, p.n_nodes + 1) if isinstance(p.event, SupExit) else [p.n_nodes]
    return _best_over(p, [(k, pin) for k in nodes for pin in pins], restarts, seed)


def _best_over(p: ActionProblem, candidates, restarts, seed, extra=None) -> RateValue:
    best = (np.inf, None, 0, 0.0, None)
    for k, pin in candidates:
        val, head, nit, gn = _minimize_pinned(p, k, pin, restarts, seed + k)
        if val < best[0]:
            best = (val, head, nit, gn, k)
    val, head, nit, gn, k = best
    diag = {"candidates": len(candidates)}
    diag.update(extra or {})
    if head is None or not np.isfinite(val):
        diag["reason"] = "no feasible candidate"
        return RateValue(np.inf, None, p.times, 0, np.nan, None, diag)
    return RateValue(max(val, 0.0), _complete(p, head), p.times, nit, gn, k, diag)


# --- control formulation --------------------------------------------------------

def _violation(event, p: ActionProblem, y):
    """Squared constraint violation of a single node value and its gradient."""
    if isinstance(event, (TerminalHalfspace,)) or (isinstance(event, SupExit) and event.kind == "halfspace"):
        n = np.atleast_1d(np.asarray(event.normal, dtype=float))
        gap = event.level - y @ n
        return (gap ** 2, -2 * gap * n) if gap > 0 else (0.0, np.zeros_like(y))
    if isinstance(event, EndpointBall):
        d = y - np.atleast_1d(np.asarray(event.center, dtype=float))
        nd = np.linalg.norm(d)
        gap = nd - event.radius
        if gap <= 0:
            return 0.0, np.zeros_like(y)
        return gap ** 2, 2 * gap * d / max(nd, 1e-300)
    c = p.x if event.center is None else np.atleast_1d(np.asarray(event.center, dtype=float))
    d = y - c
    nd = np.linalg.norm(d)
    gap = event.level - nd
    if gap <= 0:
        return 0.0, np.zeros_like(y)
    return gap ** 2, -2 * gap * d / max(nd, 1e-300)


def _control_run(p: ActionProblem, k: int, u, mu):
    m, d = p.model.dim_state, p.model.dim_noise
    h = p.h
    u = u.reshape(k, d)
    X = np.empty((k + 1, m))
    X[0] = p.x
    for i in range(k):
        X[i + 1] = X[i] + h * (p.model.b(p.t0, X[i][None])[0] + p.model.sigma(p.t0, X[i][None])[0] @ u[i])
    viol, gv = _violation(p.event, p, X[k])
    cost = 0.5 * h * float(np.sum(u * u))
    lam = mu * gv
    gu = np.empty_like(u)
    for i in range(k - 1, -1, -1):
        xi = X[i][None]
        s = p.model.sigma(p.t0, xi)[0]
        gu[i] = h * u[i] + h * s.T @ lam
        jac = np.eye(m) + h * (p.model.b_jac(p.t0, xi)[0] + np.einsum("ajq,j->aq", p.model.sigma_jac(p.t0, xi)[0], u[i]))
        lam = jac.T @ lam
    return cost + mu * viol, gu.ravel(), cost, viol, X


def _minimize_control(p: ActionProblem, restarts: int, seed: int, tol: float = 1e-8) -> RateValue:
    d = p.model.dim_noise
    nodes = range(1, p.n_nodes + 1) if isinstance(p.event, SupExit) else [p.n_nodes]
    rng = np.random.default_rng(seed)
    best = (np.inf, None, 0, np.nan, None, {})
    for k in nodes:
        for r in range(max(restarts, 1)):
            u = np.zeros(k * d) if r == 0 else rng.standard_normal(k * d)
            history = []
            for mu in (1e2, 1e4, 1e6, 1e8):
                res = minimize(lambda v: _control_run(p, k, v, mu)[:2], u, jac=True, method="L-BFGS-B",
                               options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
                u = res.x
                _, _, cost, viol, X = _control_run(p, k, u, mu)
                history.append((mu, cost, viol))
            if viol <= tol and cost < best[0]:
                best = (cost, X, res.nit, float(np.max(np.abs(res.jac))), k, {"penalty_history": history})
    val, head, nit, gn, k, diag = best
    diag = dict(diag, formulation="control")
    if head is None:
        diag["reason"] = "constraint not reached by any restart"
        return RateValue(np.inf, None, p.times, 0, np.nan, None, diag)
    return RateValue(val, _complete(p, head), p.times, nit, gn, k, diag)


# --- rate function for Y through the limit field -----------------------------------

def _level_roots(fn, level, lo, hi, n_scan):
    xs = np.linspace(lo, hi, n_scan)
    vals = fn(xs) - level
    roots = list(xs[vals == 0])
    s = np.sign(vals)
    for j in np.flatnonzero(s[:-1] * s[1:] < 0):
        roots.append(brentq(lambda z: float(fn(np.array([z]))[0] - level), xs[j], xs[j + 1], xtol=1e-13, rtol=1e-15))
    return sorted(roots)


def _in_set(event, value):
    if isinstance(event, TerminalHalfspace) or (isinstance(event, SupExit) and event.kind == "halfspace"):
        n = float(np.atleast_1d(event.normal)[0])
        return n * value >= event.level
    if isinstance(event, EndpointBall):
        return abs(value - float(np.atleast_1d(event.center)[0])) <= event.radius
    raise DomainError("tube exits on Y are not supported; use a halfspace exit per side")


def _levels(event):
    if isinstance(event, EndpointBall):
        c = float(np.atleast_1d(event.center)[0])
        return [c - event.radius, c + event.radius] if event.radius > 0 else [c]
    n = float(np.atleast_1d(event.normal)[0])
    return [event.level / n]


def rate_for_Y(problem: ActionProblem, u0: Callable, target, restarts: int = 3, seed: int = 0,
               search: Optional[tuple] = None, n_scan: int = 4001) -> RateValue:
    """Rate of the backward component through the contraction ``psi = u0(., phi)``.

    ``u0(k, xs)`` is the noiseless decoupling field at node time ``s_k`` on a
    flat array of states (``m = 1``).  ``target`` is either a node path
    ``psi`` of shape ``(K+1,)`` or an event on ``psi`` (terminal halfspace,
    endpoint ball, or one-sided exit).  Events become unions of
    pinned-endpoint problems on the boundary points of the level sets of
    ``u0(s_k, .)``, located by bracketing and Brent's method inside
    ``search`` (default: start +- 12 sqrt(T - t0) plus flow range).
    """
    p = problem
    if p.model.dim_state != 1:
        raise DomainError("rate_for_Y works with scalar states")
    flow = discrete_flow(p)[:, 0]
    if search is None:
        w = 12 * np.sqrt(p.T - p.t0) * (1 + float(np.abs(p.model.sigma(p.t0, p.x[None])).max()))
        search = (min(flow.min(), p.x[0]) - w, max(flow.max(), p.x[0]) + w)
    lo, hi = search
    K = p.n_nodes
    if isinstance(target, np.ndarray) or isinstance(target, (list, tuple)):
        return _rate_for_path(p, u0, np.asarray(target, dtype=float), lo, hi, n_scan)
    if isinstance(target, Everywhere):
        return RateValue(0.0, flow[:, None], p.times, diagnostics={"reason": "whole space"})
    nodes = range(1, K + 1) if isinstance(target, SupExit) else [K]
    psi_flow = np.array([u0(k, flow[k:k + 1])[0] for k in range(K + 1)])
    checks = nodes if isinstance(target, SupExit) else [K]
    if any(_in_set(target, psi_flow[k]) for k in checks):
        return RateValue(0.0, flow[:, None], p.times, diagnostics={"reason": "noiseless path lies in the event"})
    candidates = []
    for k in nodes:
        fn = lambda xs, k=k: np.asarray(u0(k, xs), dtype=float)
        for lev in _levels(target):
            for r in _level_roots(fn, lev, lo, hi, n_scan):
                candidates.append((k, _Pin("point", np.array([r]))))
    if not candidates:
        return RateValue(np.inf, None, p.times, diagnostics={"reason": "event unreachable through u0", "candidates": 0})
    return _best_over(p, candidates, restarts, seed)


def _rate_for_path(p: ActionProblem, u0, psi, lo, hi, n_scan) -> RateValue:
    """Exact path identity ``psi_k = u0(s_k, phi_k)``: dynamic programming over preimages."""
    K = p.n_nodes
    if psi.shape != (K + 1,):
        raise DomainError(f"target path must have {K + 1} nodes")
    if abs(u0(0, p.x) [0] - psi[0]) > 1e-9 * (1 + abs(psi[0])):
        return RateValue(np.inf, None, p.times, diagnostics={"reason": "psi does not start at u0(t0, x)"})
    layers = [np.array([p.x[0]])]
    for k in range(1, K + 1):
        fn = lambda xs, k=k: np.asarray(u0(k, xs), dtype=float)
        roots = np.array(_level_roots(fn, psi[k], lo, hi, n_scan))
        if roots.size == 0:
            return RateValue(np.inf, None, p.times, diagnostics={"reason": f"no preimage at node {k}"})
        layers.append(roots)
    h = p.h
    cost = np.zeros(1)
    back = []
    for k in range(K):
        a, b = layers[k], layers[k + 1]
        A, B = np.meshgrid(a, b, indexing="ij")
        mid = (0.5 * (A + B)).reshape(-1, 1)
        v = ((B - A) / h).reshape(-1)
        s2 = np.sum(p.model.sigma(p.t0, mid) ** 2, axis=(1, 2))
        r = v - p.model.b(p.t0, mid)[:, 0]
        seg = (0.5 * h * r * r / s2).reshape(A.shape)
        tot = cost[:, None] + seg
        back.append(np.argmin(tot, axis=0))
        cost = np.min(tot, axis=0)
    j = int(np.argmin(cost))
    idx = [j]
    for k in range(K - 1, -1, -1):
        j = int(back[k][j])
        idx.append(j)
    idx.reverse()
    path = np.array([layers[k][idx[k]] for k in range(K + 1)])[:, None]
    return RateValue(float(cost.min()), path, p.times, diagnostics={"preimages": [len(l) for l in layers]})


# --- empirical estimator ----------------------------------------------------------

@dataclass(frozen=True)
class LdpRow:
    epsilon: float
    hits: int
    n_paths: int
    eps_log_p: float
    stderr: float
    flagged: bool


def empirical_ldp(model: ForwardModel, x, eps_list: Sequence[float], event, ens: PathEnsemble,
                  block: int = 16384) -> List[LdpRow]:
    """Hit frequencies of ``event`` under ``X^eps`` with common random numbers.

    Paths are streamed in blocks of the ensemble, so memory stays bounded.
    Rows with zero hits are flagged and carry ``nan`` rather than a number.
    """
    grid = ens.grid
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eps = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps):
        raise DomainError("epsilon values must be positive")
    hits = np.zeros(len(eps), dtype=np.int64)
    for lo, hi in chunk_bounds(ens.n_paths, block):
        dW = ens.block(lo, hi)
        start = np.broadcast_to(x, (hi - lo, x.size))
        for r, e in enumerate(eps):
            X = euler_paths(model.b, model.sigma, grid, dW, start, float(np.sqrt(e)), lo)
            hv = event.hit(X, x) if isinstance(event, SupExit) else event.hit(X)
            hits[r] += int(np.count_nonzero(hv))
    rows = []
    M = ens.n_paths
    for e, hcount in zip(eps, hits):
        if hcount == 0:
            rows.append(LdpRow(e, 0, M, float("nan"), float("nan"), True))
            continue
        phat = hcount / M
        se = e * np.sqrt((1 - phat) / (phat * M))
        rows.append(LdpRow(e, int(hcount), M, e * float(np.log(phat)), float(se), False))
    return rows


def extrapolate(rows: Sequence[LdpRow]) -> tuple:
    """Linear fit of ``eps log p`` against ``eps``; returns ``(intercept, slope)``."""
    ok = [r for r in rows if not r.flagged]
    if len(ok) < 2:
        return float("nan"), float("nan")
    e = np.array([r.epsilon for r in ok])
    v = np.array([r.eps_log_p for r in ok])
    slope, intercept = np.polyfit(e, v, 1)
    return float(intercept), float(slope)
