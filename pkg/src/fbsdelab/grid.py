"""Uniform time grids and reproducible Brownian increment ensembles.

Increments come from a counter-based generator (Philox keyed by the master
seed).  Path ``j`` owns a fixed block of the counter space, so any path, or
any contiguous slice of paths, can be regenerated on its own and matches the
corresponding slice of a full generation bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtri

from ._parallel import chunked_map
from .errors import DomainError

_MASK64 = (1 << 64) - 1
_TWO53 = 2.0 ** -53


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        t.flags.writeable = False
        return t

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps * factor)


def make_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    if not (np.isfinite(t0) and np.isfinite(T)) or t0 >= T:
        raise DomainError(f"need t0 < T, got t0={t0}, T={T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise DomainError(f"n_steps must be a positive integer, got {n_steps}")
    return TimeGrid(float(t0), float(T), int(n_steps))


def _stride(n_steps: int, dim: int) -> int:
    # Philox emits 4 words per counter increment; keep each path block aligned.
    n = n_steps * dim
    return n + (-n) % 4


def _normal_block(seed: int, first_stream: int, n_streams: int, n_steps: int, dim: int) -> np.ndarray:
    stride = _stride(n_steps, dim)
    bg = np.random.Philox(key=[seed & _MASK64, 0])
    if first_stream:
        bg.advance(first_stream * stride // 4)
    raw = bg.random_raw(n_streams * stride).reshape(n_streams, stride)[:, : n_steps * dim]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO53
    return ndtri(u).reshape(n_streams, n_steps, dim)


def path_increments(grid: TimeGrid, dim: int, seed: int, j: int, antithetic: bool = False) -> np.ndarray:
    """Increments of path ``j`` alone, shape ``(n_steps, dim)``."""
    stream, sign = (j // 2, -1.0 if j % 2 else 1.0) if antithetic else (j, 1.0)
    z = _normal_block(seed, stream, 1, grid.n_steps, dim)[0]
    return sign * np.sqrt(grid.dt) * z


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``n_paths`` independent ``dim``-dimensional Brownian paths on ``grid``.

    The increment array is materialized lazily and is read-only; use
    :meth:`block` to stream slices of very large ensembles instead.
    """

    grid: TimeGrid
    n_paths: int
    dim: int
    seed: int
    antithetic: bool = False
    workers: int = field(default=1, compare=False, repr=False)

    def block(self, lo: int, hi: int) -> np.ndarray:
        """Increments of paths ``lo..hi-1``, shape ``(hi-lo, n_steps, dim)``."""
        n, d = self.grid.n_steps, self.dim
        scale = np.sqrt(self.grid.dt)
        if not self.antithetic:
            return scale * _normal_block(self.seed, lo, hi - lo, n, d)
        s_lo, s_hi = lo // 2, (hi - 1) // 2 + 1
        z = _normal_block(self.seed, s_lo, s_hi - s_lo, n, d)
        paired = np.repeat(z, 2, axis=0)
        paired[1::2] *= -1.0
        off = lo - 2 * s_lo
        return scale * paired[off : off + hi - lo]

    @cached_property
    def increments(self) -> np.ndarray:
        parts = chunked_map(self.block, self.n_paths, self.workers)
        out = np.concatenate(parts, axis=0)
        out.flags.writeable = False
        return out

    def brownian(self) -> np.ndarray:
        """Cumulative sums ``W_{t_i}`` with ``W_{t_0} = 0``, shape ``(M, n_steps+1, dim)``."""
        w = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def sample_ensemble(grid: TimeGrid, n_paths: int, dim: int, seed: int,
                    antithetic: bool = False, workers: int = 1) -> PathEnsemble:
    if int(n_paths) != n_paths or n_paths < 1:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    if int(dim) != dim or dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    if int(seed) != seed or seed < 0 or seed > _MASK64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return PathEnsemble(grid, int(n_paths), int(dim), int(seed), bool(antithetic), int(workers))
