"""BSDE drivers with polynomial cross terms, truncation, and the linearizer.

A driver ``f(t, x, y, z)`` is vectorized: ``x`` is ``(P, m)``, ``y`` is
``(P,)``, ``z`` is ``(P, d)`` and the result is ``(P,)``.  Each driver
carries the constants ``(K, k, gamma)`` of the growth bound

    |f| <= K (1 + |y| + (1 + |y|^k)|z| + (1 + gamma |y|^k)|z|^2)

and, optionally, derivative oracles used by the gradient solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .errors import DomainError, TransformRangeError

SLACK = 0.05
_T_SLICES = (0.0, 0.3, 0.7, 1.0)


@dataclass(frozen=True, eq=False)
class Driver:
    f: Callable
    K: float
    k: int = 1
    gamma: float = 0.0
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    dx: Optional[Callable] = None
    dy: Optional[Callable] = None
    dz: Optional[Callable] = None

    def __call__(self, t, x, y, z):
        return self.f(t, x, y, z)

    @property
    def has_derivatives(self) -> bool:
        return self.dy is not None and self.dz is not None


@dataclass(frozen=True, eq=False)
class TerminalCondition:
    g: Callable
    M: float
    lipschitz: float
    grad: Optional[Callable] = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.g(x)


def a_priori_bound(K: float, M: float, T: float) -> float:
    """Uniform bound ``e^{KT}(M + KT)`` on ``|Y|``, independent of gamma."""
    return float(np.exp(K * T) * (M + K * T))


# --- validation -------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    growth_ratio: float
    growth_witness: tuple
    lipschitz_ratio: float
    lipschitz_witness: tuple
    slack: float = SLACK


def growth_bound(drv: Driver, y, z):
    ay = np.abs(y)
    nz = np.linalg.norm(z, axis=-1)
    yk = ay ** drv.k
    return drv.K * (1 + ay + (1 + yk) * nz + (1 + drv.gamma * yk) * nz ** 2)


def lipschitz_bound(drv: Driver, y, z, y2, z2):
    """Right-hand side of the local Lipschitz condition on ``(y, z)``."""
    K, k, g = drv.K, drv.k, drv.gamma
    ay, ay2 = np.abs(y), np.abs(y2)
    nz, nz2 = np.linalg.norm(z, axis=-1), np.linalg.norm(z2, axis=-1)
    dy = np.abs(y - y2)
    dz = np.linalg.norm(z - z2, axis=-1)
    pow_km1 = ay ** (k - 1) + ay2 ** (k - 1)
    ycoef = 1 + (1 + g * nz + g * nz2) * pow_km1 * (nz + nz2)
    zcoef = 1 + ay ** k + ay2 ** k + (1 + g * ay ** k + g * ay2 ** k) * (nz + nz2)
    return K * (ycoef * dy + zcoef * dz)


def _cloud(rng, n, d, m):
    """Mixed uniform / heavy-tailed sample of ``(x, y, z)``."""
    half = n // 2
    y = np.concatenate([rng.uniform(-5, 5, half), np.clip(rng.standard_cauchy(n - half) * 3, -1e4, 1e4)])
    z = np.concatenate([rng.uniform(-5, 5, (half, d)), np.clip(rng.standard_cauchy((n - half, d)) * 3, -1e4, 1e4)])
    x = rng.standard_normal((n, m)) * 3
    perm = rng.permutation(n)
    return x, y[perm], z[perm]


def validate_driver(drv: Driver, cloud_size: int = 4096, seed: int = 0, m: int = 1, d: int = 1,
                    slack: float = SLACK) -> ValidationReport:
    """Probe the growth and Lipschitz bounds on a random point cloud.

    Never raises on a failing driver; the returned report carries the worst
    ratios and the points that produced them.
    """
    if cloud_size < 1:
        raise DomainError("cloud_size must be >= 1")
    rng = np.random.default_rng(seed)
    x, y, z = _cloud(rng, cloud_size, d, m)
    slices = np.arange(cloud_size) % len(_T_SLICES)

    def evaluate(yy, zz):
        out = np.empty(cloud_size)
        for s, ts in enumerate(_T_SLICES):
            idx = slices == s
            if idx.any():
                out[idx] = drv.f(ts, x[idx], yy[idx], zz[idx])
        return out

    with np.errstate(over="ignore", invalid="ignore"):
        fv = evaluate(y, z)
        gr = np.abs(fv) / growth_bound(drv, y, z)
    gr = np.where(np.isfinite(gr), gr, np.inf)
    gi = int(np.argmax(gr))
    growth_ratio = float(gr[gi])
    growth_witness = (float(y[gi]), z[gi].tolist())

    # Lipschitz pairs: half near-diagonal, half far apart
    scale = np.where(rng.random(cloud_size) < 0.5, 1e-3, 1.0)
    y2 = y + rng.standard_normal(cloud_size) * scale * (1 + np.abs(y)) * 0.1
    z2 = z + rng.standard_normal((cloud_size, d)) * scale[:, None] * 0.1 * (1 + np.abs(z))
    with np.errstate(over="ignore", invalid="ignore"):
        diff = np.abs(fv - evaluate(y2, z2))
        lr = diff / lipschitz_bound(drv, y, z, y2, z2)
    lr = np.where(np.isfinite(lr), lr, np.where(diff == 0, 0.0, np.inf))
    li = int(np.argmax(lr))
    lip_ratio = float(lr[li])
    lip_witness = ((float(y[li]), z[li].tolist()), (float(y2[li]), z2[li].tolist()))
    passed = growth_ratio <= 1 + slack and lip_ratio <= 1 + slack
    return ValidationReport(passed, growth_ratio, growth_witness, lip_ratio, lip_witness, slack)


# --- built-in drivers -------------------------------------------------------

def _zeros_like_x(t, x, y, z):
    return np.zeros_like(x)


def _sumz(z):
    return np.sum(z, axis=-1)


def zero_driver() -> Driver:
    return Driver(lambda t, x, y, z: np.zeros_like(y), K=0.0, kind="zero",
                  dx=_zeros_like_x, dy=lambda t, x, y, z: np.zeros_like(y),
                  dz=lambda t, x, y, z: np.zeros_like(z))


def cross_linear_driver(nu: float) -> Driver:
    """``nu * y * <1, z>``; with ``d = 1`` this is ``nu y z``."""
    nu = float(nu)
    return Driver(lambda t, x, y, z: nu * y * _sumz(z), K=abs(nu), k=1, gamma=0.0,
                  kind="cross_linear", params={"nu": nu}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: nu * _sumz(z),
                  dz=lambda t, x, y, z: nu * np.broadcast_to(y[:, None], z.shape))


def cross_quadratic_driver(c: float = 1.0) -> Driver:
    """``c * y |z|^2``."""
    c = float(c)
    return Driver(lambda t, x, y, z: c * y * np.sum(z * z, axis=-1), K=abs(c), k=1, gamma=1.0,
                  kind="cross_quadratic", params={"c": c}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: c * np.sum(z * z, axis=-1),
                  dz=lambda t, x, y, z: 2 * c * y[:, None] * z)


def drift_quadratic_driver(theta, gamma: float) -> Driver:
    """``<theta, z> + gamma |z|^2``."""
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    g = float(gamma)
    return Driver(lambda t, x, y, z: z @ th + g * np.sum(z * z, axis=-1),
                  K=float(max(np.linalg.norm(th), abs(g))), k=1, gamma=0.0,
                  kind="drift_quadratic", params={"theta": th.tolist(), "gamma": g}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: np.zeros_like(y),
                  dz=lambda t, x, y, z: th + 2 * g * z)


def entropic_driver(gamma: float) -> Driver:
    """``gamma/2 |z|^2``; solved in closed form by ``(1/gamma) log E[e^{gamma xi}]``."""
    g = float(gamma)
    return Driver(lambda t, x, y, z: 0.5 * g * np.sum(z * z, axis=-1), K=0.5 * abs(g), k=1, gamma=0.0,
                  kind="entropic", params={"gamma": g}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: np.zeros_like(y),
                  dz=lambda t, x, y, z: g * z)


def risk_measure_driver(a: float, b: float) -> Driver:
    """``-(a y^+ - b y^-)|z|^2`` with ``0 < a < b``."""
    a, b = float(a), float(b)
    if not 0 < a < b:
        raise DomainError(f"need 0 < a < b, got a={a}, b={b}")

    def phi(y):
        return a * np.maximum(y, 0) - b * np.maximum(-y, 0)

    return Driver(lambda t, x, y, z: -phi(y) * np.sum(z * z, axis=-1), K=b, k=1, gamma=1.0,
                  kind="risk_measure", params={"a": a, "b": b}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: -np.where(y >= 0, a, b) * np.sum(z * z, axis=-1),
                  dz=lambda t, x, y, z: -2 * phi(y)[:, None] * z)


def damping_driver(lam: float) -> Driver:
    lam = float(lam)
    return Driver(lambda t, x, y, z: -lam * y, K=abs(lam), kind="damping", params={"lam": lam},
                  dx=_zeros_like_x, dy=lambda t, x, y, z: np.full_like(y, -lam),
                  dz=lambda t, x, y, z: np.zeros_like(z))


def burgers_driver(a: float, lam: float, epsilon: float) -> Driver:
    """``-(a / sqrt(2 eps)) y z - lam y`` for the viscous Burgers equation with damping."""
    a, lam, eps = float(a), float(lam), float(epsilon)
    if eps <= 0:
        raise DomainError("Burgers driver needs epsilon > 0")
    c = a / np.sqrt(2 * eps)
    return Driver(lambda t, x, y, z: -c * y * _sumz(z) - lam * y, K=max(abs(c), abs(lam)), k=1,
                  kind="burgers", params={"a": a, "lam": lam, "epsilon": eps}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: -c * _sumz(z) - lam,
                  dz=lambda t, x, y, z: -c * np.broadcast_to(y[:, None], z.shape))


def lipschitz_driver(lam: float) -> Driver:
    """``-lam y + sin(<1, z>)``, globally Lipschitz."""
    lam = float(lam)
    return Driver(lambda t, x, y, z: -lam * y + np.sin(_sumz(z)), K=max(abs(lam), 1.0),
                  kind="lipschitz", params={"lam": lam}, dx=_zeros_like_x,
                  dy=lambda t, x, y, z: np.full_like(y, -lam),
                  dz=lambda t, x, y, z: np.broadcast_to(np.cos(_sumz(z))[:, None], z.shape))


def shifted(drv: Driver, c: float) -> Driver:
    """``f + c``; the growth constant absorbs ``|c|``."""
    c = float(c)
    f = drv.f
    return replace(drv, f=lambda t, x, y, z: f(t, x, y, z) + c, K=drv.K + abs(c),
                   kind=f"{drv.kind}+{c:g}", params={**drv.params, "shift": c})


def exponential_driver() -> Driver:
    """``e^y`` declared with polynomial constants; it must fail validation."""
    return Driver(lambda t, x, y, z: np.exp(y), K=1.0, k=1, gamma=1.0, kind="exponential")


DRIVERS = {
    "zero": lambda p: zero_driver(),
    "cross_linear": lambda p: cross_linear_driver(p.get("nu", 1.0)),
    "cross_quadratic": lambda p: cross_quadratic_driver(p.get("c", 1.0)),
    "drift_quadratic": lambda p: drift_quadratic_driver(p.get("theta", 0.0), p.get("gamma", 0.5)),
    "entropic": lambda p: entropic_driver(p.get("gamma", 1.0)),
    "risk_measure": lambda p: risk_measure_driver(p.get("a", 0.5), p.get("b", 1.0)),
    "damping": lambda p: damping_driver(p.get("lam", 1.0)),
    "burgers": lambda p: burgers_driver(p.get("a", 1.0), p.get("lam", 1.0), p.get("epsilon", 0.5)),
    "lipschitz": lambda p: lipschitz_driver(p.get("lam", 1.0)),
}

DRIVER_PARAMS = {
    "zero": set(), "cross_linear": {"nu"}, "cross_quadratic": {"c"},
    "drift_quadratic": {"theta", "gamma"}, "entropic": {"gamma"}, "risk_measure": {"a", "b"},
    "damping": {"lam"}, "burgers": {"a", "lam", "epsilon"}, "lipschitz": {"lam"},
}


def make_driver(kind: str, params: Optional[dict] = None) -> Driver:
    params = dict(params or {})
    if kind not in DRIVERS:
        raise DomainError(f"unknown driver kind {kind!r}; known: {sorted(DRIVERS)}")
    extra = set(params) - DRIVER_PARAMS[kind] - {"shift"}
    if extra:
        raise DomainError(f"unknown parameter(s) {sorted(extra)} for driver {kind!r}")
    shift = params.pop("shift", 0.0)
    drv = DRIVERS[kind](params)
    return shifted(drv, shift) if shift else drv


# --- terminal conditions ----------------------------------------------------

def _first(x):
    return x[:, 0]


def cos_terminal(amp: float = 1.0, freq: float = 1.0, phase: float = 0.0, shift: float = 0.0) -> TerminalCondition:
    """``amp * cos(freq * x_1 + phase) + shift``."""
    A, w, ph, s = float(amp), float(freq), float(phase), float(shift)

    def grad(x):
        out = np.zeros_like(x)
        out[:, 0] = -A * w * np.sin(w * x[:, 0] + ph)
        return out

    return TerminalCondition(lambda x: A * np.cos(w * _first(x) + ph) + s, M=abs(A) + abs(s),
                             lipschitz=abs(A * w), grad=grad, kind="cos",
                             params={"amp": A, "freq": w, "phase": ph, "shift": s})


def sin_terminal(amp: float = 1.0, freq: float = 1.0) -> TerminalCondition:
    return cos_terminal(amp, freq, phase=-np.pi / 2)


def tanh_terminal(amp: float = 1.0, scale: float = 1.0, shift: float = 0.0) -> TerminalCondition:
    A, c, s = float(amp), float(scale), float(shift)

    def grad(x):
        out = np.zeros_like(x)
        out[:, 0] = A * c / np.cosh(c * x[:, 0]) ** 2
        return out

    return TerminalCondition(lambda x: A * np.tanh(c * _first(x)) + s, M=abs(A) + abs(s),
                             lipschitz=abs(A * c), grad=grad, kind="tanh",
                             params={"amp": A, "scale": c, "shift": s})


def constant_terminal(c: float) -> TerminalCondition:
    c = float(c)
    return TerminalCondition(lambda x: np.full(x.shape[0], c), M=abs(c), lipschitz=0.0,
                             grad=lambda x: np.zeros_like(x), kind="constant", params={"c": c})


TERMINALS = {
    "cos": (cos_terminal, {"amp", "freq", "phase", "shift"}),
    "sin": (sin_terminal, {"amp", "freq"}),
    "tanh": (tanh_terminal, {"amp", "scale", "shift"}),
    "constant": (constant_terminal, {"c"}),
}


def make_terminal(kind: str, params: Optional[dict] = None) -> TerminalCondition:
    params = dict(params or {})
    if kind not in TERMINALS:
        raise DomainError(f"unknown terminal kind {kind!r}; known: {sorted(TERMINALS)}")
    fn, allowed = TERMINALS[kind]
    extra = set(params) - allowed
    if extra:
        raise DomainError(f"unknown parameter(s) {sorted(extra)} for terminal {kind!r}")
    if kind == "constant" and "c" not in params:
        raise DomainError("terminal 'constant' needs parameter 'c'")
    return fn(**params)


def probe_terminal(tc: TerminalCondition, m: int = 1, n: int = 2048, seed: int = 0, slack: float = SLACK):
    """Return ``(sup_ok, lipschitz_ok)`` from a random probe cloud."""
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.standard_normal((n, m)) * 3, rng.uniform(-50, 50, (n, m))])
    y = x + rng.standard_normal(x.shape) * 0.01
    gx, gy = tc.g(x), tc.g(y)
    sup_ok = bool(np.max(np.abs(gx)) <= tc.M * (1 + slack) + 1e-15)
    ratio = np.abs(gx - gy) / np.linalg.norm(x - y, axis=1)
    lip_ok = bool(np.max(ratio) <= tc.lipschitz * (1 + slack) + 1e-12)
    return sup_ok, lip_ok


# --- truncation of the identity ----------------------------------------------

@dataclass(frozen=True)
class TruncationFamily:
    """Odd C^2 truncation: identity on ``[-(n-1), n-1]``, constant ``+-n`` beyond ``n+1``.

    On ``[n-1, n+1]`` the function is ``n - 1 + 2s - 2s^3 + s^4`` with
    ``s = (|x| - n + 1) / 2``, whose slope ``(1-s)^2 (1+2s)`` decreases from 1
    to 0.  The saturation value ``n`` can only be reached with ``|h'| <= 1``
    if the blend region is wider than one unit.
    """

    n: int

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        a = np.abs(x)
        s = np.clip((a - (self.n - 1)) / 2.0, 0.0, 1.0)
        blend = self.n - 1 + 2 * s - 2 * s ** 3 + s ** 4
        return np.sign(x) * np.where(a <= self.n - 1, a, blend)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        a = np.abs(x)
        s = np.clip((a - (self.n - 1)) / 2.0, 0.0, 1.0)
        return np.where(a <= self.n - 1, 1.0, (1 - s) ** 2 * (1 + 2 * s))

    @property
    def saturation_start(self) -> float:
        return self.n + 1.0


def make_truncation(n: int) -> TruncationFamily:
    if int(n) != n or n < 2:
        raise DomainError(f"truncation level must be an integer >= 2, got {n}")
    return TruncationFamily(int(n))


def truncate_driver(drv: Driver, fam: TruncationFamily) -> Driver:
    """``f_n(t, x, y, z) = f(t, x, h_n(y), z)`` with the same growth constants."""
    f, h = drv.f, fam
    dy = drv.dy
    new_dy = None
    if dy is not None:
        def new_dy(t, x, y, z):
            return dy(t, x, h(y), z) * h.derivative(y)
    dz = drv.dz
    new_dz = None if dz is None else (lambda t, x, y, z: dz(t, x, h(y), z))
    dx = drv.dx
    new_dx = None if dx is None else (lambda t, x, y, z: dx(t, x, h(y), z))
    return replace(drv, f=lambda t, x, y, z: f(t, x, h(y), z), kind=f"{drv.kind}|h{fam.n}",
                   params={**drv.params, "truncation": fam.n}, dx=new_dx, dy=new_dy, dz=new_dz)


# --- linearizing transform ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearizingTransform:
    """Tabulated ``Phi`` with ``Phi' = exp(int_0^y 2 g)``, ``Phi(0) = 0``.

    Under ``Phi`` a driver ``g(y)|z|^2`` disappears: ``Phi(Y)`` is a
    martingale.
    """

    g_coef: Callable
    y_max: float
    y: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    _fwd: CubicHermiteSpline = field(repr=False)
    _inv: CubicHermiteSpline = field(repr=False)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(np.abs(y) > self.y_max * (1 + 1e-12)):
            raise TransformRangeError(f"value {np.max(np.abs(y)):.4g} outside working interval +-{self.y_max:.4g}")
        return self._fwd(y)

    def derivative(self, y):
        return self._fwd.derivative()(np.asarray(y, dtype=float))

    def second_derivative(self, y):
        y = np.asarray(y, dtype=float)
        return 2.0 * self.g_coef(y) * self.derivative(y)

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        lo, hi = self.phi[0], self.phi[-1]
        if np.any(w < lo) or np.any(w > hi):
            raise TransformRangeError(
                f"transformed value outside table range [{lo:.6g}, {hi:.6g}]; enlarge the working interval")
        return self._inv(w)

    @property
    def range(self):
        return float(self.phi[0]), float(self.phi[-1])


def build_linearizer(g_coef: Callable, y_max: float, table_size: int = 10_000) -> LinearizingTransform:
    """Tabulate ``Phi`` on ``[-y_max, y_max]`` by adaptive integration.

    ``(G, Phi)`` with ``G' = 2 g`` and ``Phi' = exp(G)`` is integrated outward
    from 0 with an 8th-order adaptive Runge-Kutta rule at tight tolerance;
    ``Phi^{-1}`` is the Hermite interpolant of the swapped table with slopes
    ``1 / Phi'``.
    """
    if not (y_max > 0 and np.isfinite(y_max)):
        raise DomainError(f"y_max must be positive and finite, got {y_max}")
    if table_size < 16:
        raise DomainError("table_size must be >= 16")
    half = table_size // 2
    ys = np.linspace(0.0, y_max, half + 1)

    def rhs(s, u, sign):
        return [sign * 2.0 * float(g_coef(np.array([sign * s]))[0]), sign * np.exp(u[0])]

    branches = []
    for sign in (1.0, -1.0):
        sol = solve_ivp(rhs, (0.0, y_max), [0.0, 0.0], method="DOP853", t_eval=ys, args=(sign,),
                        rtol=1e-12, atol=1e-14)
        if not sol.success or not np.all(np.isfinite(sol.y)):
            raise DomainError("linearizer integration failed; g_coef too large for the working interval")
        branches.append(sol.y)
    (gp, pp), (gm, pm) = branches
    y = np.concatenate([-ys[:0:-1], ys])
    G = np.concatenate([gm[:0:-1], gp])
    phi = np.concatenate([pm[:0:-1], pp])
    dphi = np.exp(G)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(dphi))):
        raise DomainError("non-finite transform table; g_coef too large for the working interval")
    if np.any(np.diff(phi) <= 0):
        raise DomainError("transform table is not strictly increasing at this resolution")
    fwd = CubicHermiteSpline(y, phi, dphi)
    inv = CubicHermiteSpline(phi, y, 1.0 / dphi)
    return LinearizingTransform(g_coef, float(y_max), y, phi, dphi, fwd, inv)
