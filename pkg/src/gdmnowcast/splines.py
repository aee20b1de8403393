"""Penalised cubic B-spline bases (P-splines) for smooth model terms.

Three kinds are supported:

* ``temporal``: cubic B-splines on evenly spaced knots spanning the training
  points, second-order difference penalty, linear continuation outside the
  boundary knots.
* ``seasonal_cyclic`` / ``weekly_cyclic``: periodic cubic B-splines with ``K``
  equally spaced knots over one period and a cyclic second-order difference
  penalty.

All bases are column-centred over the training points so the smooth is
orthogonal to an intercept; :func:`evaluate_basis` applies the same offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

__all__ = ["BasisWithPenalty", "cubic_basis", "cyclic_basis", "evaluate_basis", "difference_matrix"]

KINDS = ("temporal", "seasonal_cyclic", "weekly_cyclic")


@dataclass(frozen=True)
class BasisWithPenalty:
    X: np.ndarray
    M: np.ndarray
    kind: str
    knots: np.ndarray
    K: int
    center: np.ndarray
    period: float | None = None

    @property
    def cyclic(self) -> bool:
        return self.kind != "temporal"


def difference_matrix(K: int, order: int = 2, cyclic: bool = False) -> np.ndarray:
    """Rows are ``order``-th differences of a length-``K`` coefficient vector."""
    if cyclic:
        base = np.zeros(K)
        # coefficients of the forward difference operator, wrapped modulo K
        stencil = np.array([1.0])
        for _ in range(order):
            stencil = np.convolve(stencil, [-1.0, 1.0])
        for i, c in enumerate(stencil):
            base[i % K] += c
        return np.array([np.roll(base, j) for j in range(K)])
    return np.diff(np.eye(K), n=order, axis=0)


def _temporal_raw(knots: np.ndarray, K: int, x: np.ndarray) -> np.ndarray:
    """Raw cubic B-spline evaluations with linear continuation beyond the boundary knots."""
    lo, hi = knots[3], knots[K]
    spl = BSpline(knots, np.eye(K), 3, extrapolate=False)
    inside = np.clip(x, lo, hi)
    B = spl(inside)
    below, above = x < lo, x > hi
    if below.any() or above.any():
        dspl = spl.derivative()
        if below.any():
            B[below] = spl(lo)[None, :] + (x[below] - lo)[:, None] * dspl(lo)[None, :]
        if above.any():
            B[above] = spl(hi)[None, :] + (x[above] - hi)[:, None] * dspl(hi)[None, :]
    return B


def _cardinal_cubic(u: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline supported on [0, 4)."""
    out = np.zeros_like(u)
    m = (u >= 0) & (u < 1)
    out[m] = u[m] ** 3 / 6
    m = (u >= 1) & (u < 2)
    v = u[m] - 1
    out[m] = (1 + 3 * v + 3 * v**2 - 3 * v**3) / 6
    m = (u >= 2) & (u < 3)
    v = u[m] - 2
    out[m] = (4 - 6 * v**2 + 3 * v**3) / 6
    m = (u >= 3) & (u < 4)
    v = 4 - u[m]
    out[m] = v**3 / 6
    return out


def _cyclic_raw(period: float, K: int, x: np.ndarray) -> np.ndarray:
    h = period / K
    pos = np.mod(x, period) / h
    B = np.zeros((x.shape[0], K))
    for j in range(K):
        # basis j starts at knot j; sum over wraps when the support exceeds one period
        u = np.mod(pos - j, K)
        for wrap in range(0, 4, max(K, 1)):
            B[:, j] += _cardinal_cubic(u + wrap)
    return B


def cubic_basis(points, K: int = 10) -> BasisWithPenalty:
    x = np.asarray(points, dtype=float).ravel()
    if K < 4:
        raise ValueError(f"a cubic basis needs K >= 4, got {K}")
    if x.size == 0 or not np.all(np.isfinite(x)) or np.ptp(x) <= 0:
        raise ValueError("points must span a non-degenerate interval")
    lo, hi = x.min(), x.max()
    step = (hi - lo) / (K - 3)
    knots = lo + step * (np.arange(K + 4) - 3)
    # pin the boundary knots to the data range exactly
    knots[3], knots[K] = lo, hi
    raw = _temporal_raw(knots, K, x)
    center = raw.mean(axis=0)
    D = difference_matrix(K, 2)
    return BasisWithPenalty(raw - center, D.T @ D, "temporal", knots, K, center)


def cyclic_basis(points, period: float, K: int = 7, kind: str = "weekly_cyclic") -> BasisWithPenalty:
    x = np.asarray(points, dtype=float).ravel()
    if K < 3:
        raise ValueError(f"a cyclic basis needs K >= 3, got {K}")
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    if kind not in ("weekly_cyclic", "seasonal_cyclic"):
        raise ValueError(f"unknown cyclic kind {kind!r}")
    raw = _cyclic_raw(period, K, x)
    center = raw.mean(axis=0)
    D = difference_matrix(K, 2, cyclic=True)
    knots = np.arange(K) * (period / K)
    return BasisWithPenalty(raw - center, D.T @ D, kind, knots, K, center, float(period))


def evaluate_basis(basis: BasisWithPenalty, new_points) -> np.ndarray:
    """Evaluate at new points with the training centring; linear outside for temporal kinds."""
    x = np.asarray(new_points, dtype=float).ravel()
    if basis.cyclic:
        raw = _cyclic_raw(basis.period, basis.K, x)
    else:
        raw = _temporal_raw(basis.knots, basis.K, x)
    return raw - basis.center
