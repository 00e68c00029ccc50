"""Least-squares regression bases for conditional expectations E[. | X_t].

Two families: global polynomials (probabilists' Hermite in standardized
coordinates, total degree) and local piecewise-constant partitions with
equal-count bins per coordinate.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._parallel import chunked_map, ordered_sum
from .errors import DomainError, RegressionError

RIDGE = 1e-8


@dataclass(frozen=True)
class RegressionBasis:
    family: str = "poly"
    degree: int = 4
    n_bins: int = 16
    dim: int = 1

    def __post_init__(self):
        if self.family not in ("poly", "partition"):
            raise DomainError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.n_bins < 1 or self.dim < 1:
            raise DomainError("basis degree must be >= 0, n_bins >= 1 and dim >= 1")

    @classmethod
    def default(cls, dim: int) -> "RegressionBasis":
        if dim <= 2:
            return cls("poly", degree=4, dim=dim)
        return cls("partition", n_bins=4, dim=dim)


def _multi_indices(dims: int, degree: int):
    return [a for a in itertools.product(range(degree + 1), repeat=dims) if sum(a) <= degree]


def _hermite_table(z, degree):
    """Normalized ``He_n(z) / sqrt(n!)`` for ``n = 0..degree``; shape ``(degree+1, P)``."""
    out = np.empty((degree + 1,) + z.shape)
    out[0] = 1.0
    if degree >= 1:
        out[1] = z
    for n in range(1, degree):
        out[n + 1] = z * out[n] - n * out[n - 1]
    norms = np.sqrt([math.factorial(n) for n in range(degree + 1)])
    return out / norms.reshape((-1,) + (1,) * z.ndim)


@dataclass(frozen=True, eq=False)
class FittedField:
    """A regression fit ``x -> sum_k c_k phi_k(x)`` that can be re-evaluated anywhere."""

    basis: RegressionBasis
    center: np.ndarray
    scale: np.ndarray
    active: tuple
    coef: np.ndarray
    edges: Optional[tuple] = None
    fallback: Optional[np.ndarray] = None

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.basis.family == "partition":
            raise TypeError("partition fields have no dense design; use predict")
        if not self.active:
            return np.ones((x.shape[0], 1))
        z = (x[:, self.active] - self.center[list(self.active)]) / self.scale[list(self.active)]
        tables = [_hermite_table(z[:, q], self.basis.degree) for q in range(z.shape[1])]
        idx = _multi_indices(len(self.active), self.basis.degree)
        cols = np.empty((x.shape[0], len(idx)))
        for c, alpha in enumerate(idx):
            col = tables[0][alpha[0]].copy()
            for q in range(1, len(alpha)):
                col *= tables[q][alpha[q]]
            cols[:, c] = col
        return cols

    def cells(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.zeros(x.shape[0], dtype=np.int64)
        for q, e in zip(self.active, self.edges):
            b = np.clip(np.searchsorted(e, x[:, q], side="right") - 1, 0, len(e) - 2)
            flat = flat * (len(e) - 1) + b
        return flat

    def predict(self, x) -> np.ndarray:
        if self.basis.family == "partition":
            if not self.active:
                return np.broadcast_to(self.coef[0], (np.asarray(x).shape[0],) + self.coef.shape[1:]).copy()
            return self.coef[self.cells(x)]
        return self.design(x) @ self.coef

    def gradient(self, x, h: float = 1e-5) -> np.ndarray:
        """Central-difference spatial gradient of a scalar field, ``(P, m)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for q in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[q] = h
            out[:, q] = (self.predict(x + e) - self.predict(x - e)) / (2 * h)
        return out


def _standardize(x):
    center = x.mean(axis=0)
    spread = x.std(axis=0)
    active = tuple(int(q) for q in np.flatnonzero(spread > 1e-12 * (1 + np.abs(center))))
    scale = np.where(spread > 0, spread, 1.0)
    return center, scale, active


@dataclass(frozen=True, eq=False)
class Projector:
    """Least-squares projection onto ``basis(x)`` for one fixed cloud ``x``.

    The design and the regularized normal matrix are built once, so several
    target columns computed in sequence share them.
    """

    proto: FittedField
    design: Optional[np.ndarray]
    gram: Optional[np.ndarray]
    cells: Optional[np.ndarray]
    n_cells: int
    workers: int
    step: Optional[int]

    def fit(self, targets) -> FittedField:
        y = np.asarray(targets, dtype=float)
        if y.shape[0] != (self.design.shape[0] if self.design is not None else self.cells.shape[0]):
            raise DomainError("targets must have one row per cloud point")
        if not np.all(np.isfinite(y)):
            raise RegressionError(f"non-finite regression targets at step {self.step}", step=self.step)
        yy = y.reshape(y.shape[0], -1)
        p = self.proto
        if self.design is None:
            counts = np.bincount(self.cells, minlength=self.n_cells).astype(float)
            sums = np.stack([np.bincount(self.cells, weights=yy[:, c], minlength=self.n_cells)
                             for c in range(yy.shape[1])], axis=1)
            overall = yy.mean(axis=0)
            coef = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], overall)
            coef = coef if y.ndim == 2 else coef[:, 0]
            return FittedField(p.basis, p.center, p.scale, p.active, coef, p.edges, overall)
        D = self.design
        parts = chunked_map(lambda lo, hi: D[lo:hi].T @ yy[lo:hi], D.shape[0], self.workers)
        b = ordered_sum(parts)
        coef = np.linalg.lstsq(self.gram, b, rcond=None)[0]
        coef = coef if y.ndim == 2 else coef[:, 0]
        return FittedField(p.basis, p.center, p.scale, p.active, coef)

    def predict(self, field: FittedField) -> np.ndarray:
        """Evaluate a field fitted by this projector on the projector's own cloud."""
        if self.design is None:
            return field.coef[self.cells]
        return self.design @ field.coef


def projector(basis: RegressionBasis, x, ridge: float = RIDGE, workers: int = 1,
              step: Optional[int] = None) -> Projector:
    """Prepare the projection onto ``basis(x)``.

    Normal equations are accumulated over fixed-size chunks in a fixed order
    and regularized by ``ridge * tr(G) / n_basis``; solves are minimum-norm.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DomainError("x must be (P, m)")
    if not np.all(np.isfinite(x)):
        raise RegressionError(f"non-finite regressors at step {step}", step=step)
    center, scale, active = _standardize(x)
    if basis.family == "partition":
        edges = []
        for q in active:
            e = np.unique(np.quantile(x[:, q], np.linspace(0, 1, basis.n_bins + 1)))
            e[0], e[-1] = -np.inf, np.inf
            edges.append(e)
        proto = FittedField(basis, center, scale, active, np.zeros(1), tuple(edges))
        n_cells = int(np.prod([len(e) - 1 for e in edges])) if edges else 1
        cells = proto.cells(x) if edges else np.zeros(x.shape[0], dtype=np.int64)
        return Projector(proto, None, None, cells, n_cells, workers, step)
    proto = FittedField(basis, center, scale, active, np.zeros(1))
    D = np.concatenate(chunked_map(lambda lo, hi: proto.design(x[lo:hi]), x.shape[0], workers), axis=0)
    G = ordered_sum(chunked_map(lambda lo, hi: D[lo:hi].T @ D[lo:hi], x.shape[0], workers))
    nb = G.shape[0]
    G = G + ridge * np.trace(G) / nb * np.eye(nb)
    if not np.all(np.isfinite(G)):
        raise RegressionError(f"non-finite design matrix at step {step}", step=step)
    if np.linalg.eigvalsh(G).min() <= 0:
        raise RegressionError(f"design matrix rank-deficient after ridge at step {step}", step=step)
    return Projector(proto, D, G, None, 1, workers, step)


def fit(basis: RegressionBasis, x, targets, ridge: float = RIDGE, workers: int = 1,
        step: Optional[int] = None) -> FittedField:
    """Least-squares fit of ``targets`` (``(P,)`` or ``(P, k)``) on ``basis(x)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DomainError("x must be (P, m) with P matching the targets")
    return projector(basis, x, ridge, workers, step).fit(y)
