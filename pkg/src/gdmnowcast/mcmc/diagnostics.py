"""Convergence diagnostics: split-chain PSRF, effective sample size, MC error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .samples import PosteriorSamples

__all__ = ["psrf", "psrf_array", "ess", "mcse", "ConvergenceReport", "convergence_report", "PSRF_THRESHOLD"]

PSRF_THRESHOLD = 1.05
LAMBDA_PASS_FRACTION = 0.93
MIN_DRAWS = 10


def _split(draws: np.ndarray) -> np.ndarray:
    """(C, N, ...) -> (2C, N//2, ...), dropping the middle draw when N is odd."""
    n = draws.shape[1] // 2
    return np.concatenate([draws[:, :n], draws[:, -n:]], axis=0)


def psrf_array(draws) -> tuple[np.ndarray, np.ndarray]:
    """Split-chain PSRF over the trailing axes of ``(chain, draw, ...)`` draws.

    Returns ``(psrf, degenerate)``. Where every split chain is constant the
    value is 1 if all chains agree and ``inf`` otherwise, flagged degenerate;
    chains that are exact copies of each other are flagged as well.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim < 2:
        raise ValueError("draws must be indexed (chain, draw, ...)")
    if x.shape[0] < 2 and x.shape[1] < 4:
        raise ValueError("need at least 2 chains or 4 draws")
    sp = _split(x)
    n = sp.shape[1]
    means = sp.mean(axis=1)
    W = sp.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    scale = np.maximum(np.abs(means).max(axis=0), 1.0)
    w_zero = W <= (1e-14 * scale) ** 2
    b_zero = B <= (1e-14 * scale) ** 2 * n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r = np.where(w_zero, np.where(b_zero, 1.0, np.inf), r)
    identical = np.all(x == x[:1], axis=(0, 1)) if x.shape[0] > 1 else np.zeros(r.shape, bool)
    return r, w_zero | identical


def psrf(draws) -> tuple[float, bool]:
    """Split-chain Gelman-Rubin statistic of one scalar, ``draws`` shaped (chain, draw)."""
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2:
        raise ValueError("draws must be a (chain, draw) matrix for a scalar")
    if x.shape[0] < 2 or x.shape[1] < MIN_DRAWS:
        raise ValueError(f"need >= 2 chains with >= {MIN_DRAWS} draws, got {x.shape}")
    r, deg = psrf_array(x)
    return float(r), bool(deg)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(axis=-1, keepdims=True), n=m)
    ac = np.fft.irfft(f * np.conj(f), n=m)[..., :n] / n
    return ac


def ess(draws) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    C, N = x.shape
    if N < 4:
        return float(C * N)
    acov = _autocov(x)
    chain_var = acov[:, 0] * N / (N - 1)
    W = chain_var.mean()
    if W <= 0:
        return float(C * N)
    var_plus = W * (N - 1) / N
    if C > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive, enforcing monotonicity
    total = 0.0
    prev = np.inf
    for t in range(0, N - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        prev = pair
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / np.log10(max(C * N, 10)))
    return float(C * N / tau)


def mcse(draws) -> float:
    """Monte-Carlo standard error of the posterior mean."""
    x = np.asarray(draws, dtype=float)
    return float(np.sqrt(x.var(ddof=1) / ess(x)))


@dataclass
class ConvergenceReport:
    theta_psrf: np.ndarray
    theta_degenerate: np.ndarray
    lambda_psrf: np.ndarray
    lambda_degenerate: np.ndarray
    lambda_fraction_ok: float
    passed: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "reason": self.reason,
            "theta_psrf": self.theta_psrf.tolist(),
            "theta_degenerate": self.theta_degenerate.tolist(),
            "lambda_fraction_below_threshold": float(self.lambda_fraction_ok),
            "lambda_psrf_max": float(np.max(self.lambda_psrf)) if self.lambda_psrf.size else None,
            "threshold": PSRF_THRESHOLD,
        }

    def rows(self):
        """``(parameter, psrf, degenerate)`` tuples for tabular output."""
        out = [(f"theta[{s}]", float(r), bool(d)) for s, (r, d) in enumerate(zip(self.theta_psrf, self.theta_degenerate))]
        T, S = self.lambda_psrf.shape
        for t in range(T):
            for s in range(S):
                out.append((f"lambda[{t},{s}]", float(self.lambda_psrf[t, s]), bool(self.lambda_degenerate[t, s])))
        return out


def convergence_report(samples: PosteriorSamples) -> ConvergenceReport:
    """PSRF of every ``lambda[t, s]`` and ``theta[s]`` with the pass rule.

    Passes when every ``theta`` PSRF and at least 93% of the ``lambda`` PSRFs
    are below 1.05. Too few chains or draws never pass.
    """
    lam = samples["lambda"]
    th = samples["theta"]
    C, N = lam.shape[:2]
    if C < 2 or N < MIN_DRAWS:
        nan_l = np.full(lam.shape[2:], np.nan)
        nan_t = np.full(th.shape[2:], np.nan)
        return ConvergenceReport(nan_t, np.zeros(nan_t.shape, bool), nan_l, np.zeros(nan_l.shape, bool), 0.0,
                                 False, f"insufficient draws: {C} chains x {N} draws")
    r_l, d_l = psrf_array(lam)
    r_t, d_t = psrf_array(th)
    frac = float(np.mean(r_l < PSRF_THRESHOLD)) if r_l.size else 1.0
    theta_ok = bool(np.all(r_t < PSRF_THRESHOLD))
    passed = theta_ok and frac >= LAMBDA_PASS_FRACTION
    reason = "" if passed else ("theta PSRF above threshold" if not theta_ok else "too many lambda PSRF above threshold")
    return ConvergenceReport(r_t, d_t, r_l, d_l, frac, passed, reason)
