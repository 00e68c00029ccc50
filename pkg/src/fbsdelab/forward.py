"""Forward diffusions: Euler-Maruyama paths, the noiseless flow, epsilon gaps.

Coefficient functions are vectorized over a leading batch axis:
``drift(t, x)`` maps ``(P, m)`` to ``(P, m)`` and ``diffusion(t, x)`` maps
``(P, m)`` to ``(P, m, d)``.  They must be pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._parallel import chunked_map
from .errors import DomainError, SimulationError
from .grid import PathEnsemble, TimeGrid

_FD_STEP = 1e-6


@dataclass(frozen=True)
class ProbeReport:
    origin_bound: float
    origin_ok: bool
    lipschitz_ratio: float
    lipschitz_ok: bool
    witness: tuple

    @property
    def passed(self) -> bool:
        return self.origin_ok and self.lipschitz_ok


@dataclass(frozen=True, eq=False)
class ForwardModel:
    dim_state: int
    dim_noise: int
    drift: Callable
    diffusion: Callable
    lipschitz_K: float
    bounded: bool = False
    drift_jac: Optional[Callable] = None
    diffusion_jac: Optional[Callable] = None
    time_homogeneous: bool = True
    name: str = "custom"
    report: Optional[ProbeReport] = field(default=None, compare=False)

    def __post_init__(self):
        if self.report is None:
            object.__setattr__(self, "report", probe_model(self))

    def b(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float)

    def sigma(self, t, x):
        return np.asarray(self.diffusion(t, x), dtype=float)

    def b_jac(self, t, x):
        """Jacobian of the drift, ``(P, m, m)`` with ``[p, i, q] = d b_i / d x_q``."""
        if self.drift_jac is not None:
            return np.asarray(self.drift_jac(t, x), dtype=float)
        return _fd_jacobian(lambda y: self.b(t, y), x)

    def sigma_jac(self, t, x):
        """Jacobian of the diffusion, ``(P, m, d, m)``."""
        if self.diffusion_jac is not None:
            return np.asarray(self.diffusion_jac(t, x), dtype=float)
        return _fd_jacobian(lambda y: self.sigma(t, y), x)


def _fd_jacobian(fn, x):
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    cols = []
    for q in range(m):
        e = np.zeros(m)
        e[q] = _FD_STEP * np.maximum(1.0, np.abs(x[:, q])).max()
        cols.append((fn(x + e) - fn(x - e)) / (2 * e[q]))
    return np.stack(cols, axis=-1)


def probe_model(model: ForwardModel, n_pairs: int = 512, seed: int = 0, n_times: int = 5,
                slack: float = 0.05) -> ProbeReport:
    """Statistical check of the origin bound and the Lipschitz constant.

    Points mix standard normal, wide uniform and Cauchy samples so the probe
    reaches large ``|x|``.
    """
    rng = np.random.default_rng(seed)
    m = model.dim_state
    t_probe = np.linspace(0.0, 1.0, n_times)
    origin = 0.0
    for t in t_probe:
        z = np.zeros((1, m))
        origin = max(origin, float(np.linalg.norm(model.b(t, z)) + np.linalg.norm(model.sigma(t, z))))
    third = n_pairs // 3
    x = np.concatenate([
        rng.standard_normal((third, m)),
        rng.uniform(-20, 20, (third, m)),
        np.clip(rng.standard_cauchy((n_pairs - 2 * third, m)), -1e3, 1e3),
    ])
    dx = rng.standard_normal(x.shape) * np.where(rng.random((n_pairs, 1)) < 0.5, 1e-3, 1.0)
    y = x + dx
    worst, witness = 0.0, ()
    for t in t_probe:
        num = np.sqrt(np.sum((model.b(t, x) - model.b(t, y)) ** 2, axis=1)
                      + np.sum((model.sigma(t, x) - model.sigma(t, y)) ** 2, axis=(1, 2)))
        den = np.linalg.norm(dx, axis=1)
        ratio = num / den
        j = int(np.argmax(ratio))
        if ratio[j] > worst:
            worst, witness = float(ratio[j]), (float(t), x[j].tolist(), y[j].tolist())
    K = model.lipschitz_K
    return ProbeReport(origin, origin <= K * (1 + slack), worst, worst <= K * (1 + slack), witness)


# --- built-in models --------------------------------------------------------

def brownian_model(dim: int = 1, sigma: float = 1.0) -> ForwardModel:
    """``b = 0`` and ``sigma = sigma * I``."""
    s = float(sigma)

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        return np.broadcast_to(s * np.eye(dim), (x.shape[0], dim, dim))

    return ForwardModel(dim, dim, drift, diffusion, lipschitz_K=max(abs(s) * np.sqrt(dim), 0.0),
                        bounded=True,
                        drift_jac=lambda t, x: np.zeros((x.shape[0], dim, dim)),
                        diffusion_jac=lambda t, x: np.zeros((x.shape[0], dim, dim, dim)),
                        name=f"brownian(sigma={s})")


def ou_model(theta: float = 1.0, sigma: float = 1.0) -> ForwardModel:
    """Scalar Ornstein-Uhlenbeck dynamics ``dX = -theta X dt + sigma dW``."""
    th, s = float(theta), float(sigma)
    return ForwardModel(
        1, 1,
        drift=lambda t, x: -th * x,
        diffusion=lambda t, x: np.full((x.shape[0], 1, 1), s),
        lipschitz_K=max(abs(th), abs(s)),
        bounded=False,
        drift_jac=lambda t, x: np.full((x.shape[0], 1, 1), -th),
        diffusion_jac=lambda t, x: np.zeros((x.shape[0], 1, 1, 1)),
        name=f"ou(theta={th},sigma={s})",
    )


def constant_model(b, sigma) -> ForwardModel:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sig = np.asarray(sigma, dtype=float)
    if sig.ndim < 2:
        sig = np.diag(np.broadcast_to(np.atleast_1d(sig), b.shape))
    m, d = sig.shape
    return ForwardModel(
        m, d,
        drift=lambda t, x: np.broadcast_to(b, x.shape).copy(),
        diffusion=lambda t, x: np.broadcast_to(sig, (x.shape[0], m, d)),
        lipschitz_K=float(max(np.linalg.norm(b) + np.linalg.norm(sig), 1e-12)),
        bounded=True,
        drift_jac=lambda t, x: np.zeros((x.shape[0], m, m)),
        diffusion_jac=lambda t, x: np.zeros((x.shape[0], m, d, m)),
        name="constant",
    )


def tanh_drift_model(kappa: float = 1.0, sigma: float = 1.0) -> ForwardModel:
    """Bounded mean-reverting drift ``-tanh(kappa x)`` with constant noise."""
    k, s = float(kappa), float(sigma)
    return ForwardModel(
        1, 1,
        drift=lambda t, x: -np.tanh(k * x),
        diffusion=lambda t, x: np.full((x.shape[0], 1, 1), s),
        lipschitz_K=max(abs(k), abs(s)),
        bounded=True,
        drift_jac=lambda t, x: (-k / np.cosh(k * x) ** 2)[:, :, None],
        diffusion_jac=lambda t, x: np.zeros((x.shape[0], 1, 1, 1)),
        name=f"tanh(kappa={k},sigma={s})",
    )


# --- simulation -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForwardPaths:
    model: ForwardModel
    grid: TimeGrid
    ensemble: PathEnsemble
    epsilon: float
    x0: np.ndarray
    states: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return self.ensemble.increments


def _check_finite(block, step, offset):
    bad = ~np.isfinite(block).all(axis=tuple(range(1, block.ndim)))
    if bad.any():
        j = int(np.argmax(bad)) + offset
        raise SimulationError(f"non-finite forward state at step {step}, path {j}", step=step, path=j)


def _initial_states(x0, n_paths, m):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0[None]
    if x0.ndim == 1:
        if x0.shape[0] != m:
            raise DomainError(f"x0 has dimension {x0.shape[0]}, model expects {m}")
        return np.broadcast_to(x0, (n_paths, m)), x0
    if x0.shape != (n_paths, m):
        raise DomainError(f"x0 cloud must have shape {(n_paths, m)}, got {x0.shape}")
    return x0, x0


def euler_paths(drift_fn, diffusion_fn, grid: TimeGrid, dW: np.ndarray, start: np.ndarray,
                scale: float, offset: int = 0) -> np.ndarray:
    """Euler-Maruyama recursion on one block of increments."""
    P, n, d = dW.shape
    m = start.shape[1]
    X = np.empty((P, n + 1, m))
    X[:, 0] = start
    t = grid.times
    for i in range(n):
        x = X[:, i]
        step = x + drift_fn(t[i], x) * grid.dt
        if scale != 0.0:
            step = step + scale * np.einsum("pmd,pd->pm", diffusion_fn(t[i], x), dW[:, i])
        X[:, i + 1] = step
        _check_finite(X[:, i + 1], i + 1, offset)
    return X


def simulate_forward(model: ForwardModel, grid: TimeGrid, ens: PathEnsemble, x0,
                     epsilon: float = 1.0, workers: int = 1) -> ForwardPaths:
    """Euler-Maruyama for ``dX = b dt + sqrt(epsilon) sigma dW``.

    ``x0`` is either one starting point or a per-path cloud of shape ``(M, m)``.
    """
    if ens.dim != model.dim_noise:
        raise DomainError(f"ensemble dimension {ens.dim} != model noise dimension {model.dim_noise}")
    if ens.grid != grid:
        raise DomainError("grid does not match the ensemble grid")
    if epsilon < 0:
        raise DomainError(f"epsilon must be nonnegative, got {epsilon}")
    start, x0_rec = _initial_states(x0, ens.n_paths, model.dim_state)
    scale = float(np.sqrt(epsilon))
    dW = ens.increments

    def run(lo, hi):
        return euler_paths(model.b, model.sigma, grid, dW[lo:hi], start[lo:hi], scale, lo)

    states = np.concatenate(chunked_map(run, ens.n_paths, workers), axis=0)
    states.flags.writeable = False
    return ForwardPaths(model, grid, ens, float(epsilon), np.array(x0_rec), states)


def solve_deterministic_flow(model: ForwardModel, grid: TimeGrid, x0) -> np.ndarray:
    """Classical RK4 for ``x' = b(t, x)`` on ``grid``; returns ``(n_steps+1, m)``.

    A 2-D ``x0`` of shape ``(P, m)`` integrates ``P`` starting points at once
    and returns ``(P, n_steps+1, m)``.
    """
    x0 = np.asarray(x0, dtype=float)
    batched = x0.ndim == 2
    x = np.atleast_2d(x0).astype(float).copy()
    if x.shape[1] != model.dim_state:
        raise DomainError(f"x0 has dimension {x.shape[1]}, model expects {model.dim_state}")
    t, h = grid.times, grid.dt
    out = np.empty((x.shape[0], grid.n_steps + 1, x.shape[1]))
    out[:, 0] = x
    for i in range(grid.n_steps):
        k1 = model.b(t[i], x)
        k2 = model.b(t[i] + h / 2, x + h / 2 * k1)
        k3 = model.b(t[i] + h / 2, x + h / 2 * k2)
        k4 = model.b(t[i] + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x, i + 1, 0)
        out[:, i + 1] = x
    return out if batched else out[0]


def measure_perturbation_gap(model: ForwardModel, grid: TimeGrid, ens: PathEnsemble, x0,
                             epsilon: float, p: float = 2.0, workers: int = 1) -> float:
    """Monte Carlo ``E[sup_s |X^eps_s - X^0_s|^p]^(1/p)`` with common random numbers.

    The reference ``X^0`` is the Euler scheme run with the noise switched
    off, so the discretization of the drift cancels in the difference.
    """
    if not 0 <= epsilon <= 1:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    if p < 2:
        raise DomainError(f"p must be >= 2, got {p}")
    if epsilon == 0:
        return 0.0
    noisy = simulate_forward(model, grid, ens, x0, epsilon, workers).states
    calm = simulate_forward(model, grid, ens, x0, 0.0, workers).states
    sup = np.max(np.linalg.norm(noisy - calm, axis=2), axis=1)
    return float(np.mean(sup ** p) ** (1.0 / p))


def gap_table(model: ForwardModel, grid: TimeGrid, ens: PathEnsemble, x0, eps_list,
              p_list=(2.0, 4.0), workers: int = 1):
    """Rows ``(epsilon, gap_p...)`` plus the fitted log-log exponent per ``p``."""
    rows = [[eps] + [measure_perturbation_gap(model, grid, ens, x0, eps, p, workers) for p in p_list]
            for eps in eps_list]
    arr = np.array(rows)
    slopes = []
    for k in range(len(p_list)):
        g = arr[:, k + 1]
        ok = g > 0
        slopes.append(float(np.polyfit(np.log(arr[ok, 0]), np.log(g[ok]), 1)[0]) if ok.sum() >= 2 else float("nan"))
    return rows, slopes
