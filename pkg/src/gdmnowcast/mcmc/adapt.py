"""Proposal adaptation during burn-in.

Scalar and block proposal scales follow a Robbins-Monro recursion on the log
scale, ``log s <- log s + gamma_i * (alpha - target)``, where ``alpha`` is the
Metropolis acceptance probability of the current iteration and ``gamma_i``
decays polynomially. Multivariate blocks additionally switch to the empirical
covariance of their own draws once enough have accumulated.
"""

from __future__ import annotations

import numpy as np

__all__ = ["rm_gain", "BlockCovariance", "OPTIMAL_SCALE"]

OPTIMAL_SCALE = 2.38


def rm_gain(iteration: int, rate: float = 0.6, c: float = 3.0) -> float:
    """Robbins-Monro gain for the 0-based ``iteration``."""
    return min(0.5, c / (iteration + 1.0) ** rate)


class BlockCovariance:
    """Running mean and cross-product of per-region coefficient vectors."""

    def __init__(self, S: int, K: int):
        self.n = 0
        self.sum = np.zeros((S, K))
        self.outer = np.zeros((S, K, K))

    def add(self, beta: np.ndarray) -> None:
        self.n += 1
        self.sum += beta
        self.outer += beta[:, :, None] * beta[:, None, :]

    def cov(self, sl: slice) -> np.ndarray:
        """(S, k, k) empirical covariance of one block."""
        m = self.sum[:, sl] / self.n
        o = self.outer[:, sl, sl] / self.n
        c = (o - m[:, :, None] * m[:, None, :]) * self.n / max(self.n - 1, 1)
        return 0.5 * (c + np.swapaxes(c, 1, 2))

    def proposal_chol(self, sl: slice, fallback: np.ndarray) -> np.ndarray:
        """Cholesky factors of ``2.38^2 / k * cov``; keeps ``fallback`` where that fails."""
        cov = self.cov(sl)
        k = cov.shape[1]
        out = fallback.copy()
        for s in range(cov.shape[0]):
            c = cov[s] * OPTIMAL_SCALE**2 / k
            c += np.eye(k) * (1e-10 + 1e-6 * np.trace(c) / k)
            try:
                out[s] = np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                pass
        return out
