"""Negative-Binomial, Beta-Binomial and Generalized-Dirichlet-Multinomial.

Parametrisations
----------------
Negative-Binomial(mean ``lam``, dispersion ``theta``): variance
``lam + lam**2 / theta``; ``theta -> inf`` recovers the Poisson.

Beta-Binomial(relative mean ``nu``, dispersion ``phi``, trials ``n``): shape
parameters ``a = nu * phi`` and ``b = (1 - nu) * phi``, so large ``phi``
recovers the Binomial.

GDM(``nu``, ``phi``, ``y``) over ``D`` delay categories: a chain of ``D - 1``
Beta-Binomial conditionals, category ``d`` drawing from the trials left over
by categories ``1..d-1``; the last category takes the remainder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

__all__ = [
    "NegBinParams",
    "BetaBinParams",
    "GDMParams",
    "negbin_logpmf",
    "negbin_sample",
    "negbin_quantile",
    "betabin_logpmf",
    "betabin_sample",
    "gdm_logpmf",
    "gdm_sample",
]


@dataclass(frozen=True)
class NegBinParams:
    lam: float
    theta: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"Negative-Binomial mean must be positive, got {self.lam}")
        if not (self.theta > 0):
            raise ValueError(f"Negative-Binomial dispersion must be positive, got {self.theta}")

    @property
    def variance(self) -> float:
        return self.lam + self.lam**2 / self.theta


@dataclass(frozen=True)
class BetaBinParams:
    nu: float
    phi: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.nu < 1.0:
            raise ValueError(f"relative mean must lie in (0, 1), got {self.nu}")
        if not self.phi > 0:
            raise ValueError(f"Beta-Binomial dispersion must be positive, got {self.phi}")
        if self.n < 0 or int(self.n) != self.n:
            raise ValueError(f"number of trials must be a non-negative integer, got {self.n}")


@dataclass(frozen=True)
class GDMParams:
    nu: np.ndarray
    phi: np.ndarray
    y: int

    def __post_init__(self):
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if nu.shape != phi.shape or nu.ndim != 1:
            raise ValueError("nu and phi must be 1-d vectors of equal length")
        if np.any((nu <= 0) | (nu >= 1)):
            raise ValueError("relative means must lie in (0, 1)")
        if np.any(phi <= 0):
            raise ValueError("dispersions must be positive")
        if self.y < 0 or int(self.y) != self.y:
            raise ValueError("total must be a non-negative integer")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "phi", phi)

    @property
    def n_categories(self) -> int:
        return self.nu.shape[0] + 1


def negbin_logpmf(y, p: NegBinParams):
    """Log pmf of the mean-dispersion Negative-Binomial; vectorised over ``y``."""
    y = np.asarray(y, dtype=float)
    lam, th = p.lam, p.theta
    with np.errstate(invalid="ignore"):
        out = (
            gammaln(y + th)
            - gammaln(th)
            - gammaln(y + 1.0)
            - th * np.log1p(lam / th)
            + y * (np.log(lam) - np.log(th + lam))
        )
    out = np.where((y >= 0) & (y == np.floor(y)), out, -np.inf)
    return out[()] if out.ndim == 0 else out


def negbin_sample(p: NegBinParams, rng: np.random.Generator, size=None):
    """Gamma-Poisson mixture draw."""
    rate = rng.gamma(p.theta, p.lam / p.theta, size=size)
    return rng.poisson(rate)


def negbin_quantile(p: NegBinParams, q: float) -> int:
    """Smallest ``y`` with ``CDF(y) >= q``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    dist = stats.nbinom(p.theta, p.theta / (p.theta + p.lam))
    y = int(dist.ppf(q))
    # guard against off-by-one from floating point in ppf
    while y > 0 and dist.cdf(y - 1) >= q:
        y -= 1
    while dist.cdf(y) < q:
        y += 1
    return y


def _betabin_terms(z, n, a, b):
    return (
        gammaln(n + 1.0)
        - gammaln(z + 1.0)
        - gammaln(n - z + 1.0)
        + gammaln(z + a)
        + gammaln(n - z + b)
        - gammaln(n + a + b)
        - gammaln(a)
        - gammaln(b)
        + gammaln(a + b)
    )


def betabin_logpmf(z, p: BetaBinParams):
    """Log pmf of the Beta-Binomial with ``a = nu*phi``, ``b = (1-nu)*phi``."""
    z_arr = np.asarray(z)
    if np.any((z_arr < 0) | (z_arr > p.n)):
        raise ValueError(f"z must lie in [0, {p.n}], got {z}")
    a = p.nu * p.phi
    b = (1.0 - p.nu) * p.phi
    out = _betabin_terms(z_arr.astype(float), float(p.n), a, b)
    return out[()] if np.ndim(out) == 0 else out


def betabin_sample(p: BetaBinParams, rng: np.random.Generator) -> int:
    if p.n == 0:
        return 0
    prob = rng.beta(p.nu * p.phi, (1.0 - p.nu) * p.phi)
    return int(rng.binomial(p.n, prob))


def gdm_logpmf(z, params: GDMParams) -> float:
    """Sum of the sequential Beta-Binomial conditionals; the last category is the remainder."""
    z = np.asarray(z, dtype=np.int64)
    if z.ndim != 1 or z.shape[0] != params.n_categories:
        raise ValueError(f"z must have length {params.n_categories}")
    if np.any(z < 0):
        raise ValueError("counts must be non-negative")
    if int(z.sum()) != int(params.y):
        raise ValueError(f"counts sum to {int(z.sum())}, expected {params.y}")
    n = float(params.y)
    total = 0.0
    for d in range(params.n_categories - 1):
        a = params.nu[d] * params.phi[d]
        b = (1.0 - params.nu[d]) * params.phi[d]
        total += float(_betabin_terms(float(z[d]), n, a, b))
        n -= z[d]
    return total


def gdm_sample(params: GDMParams, rng: np.random.Generator) -> np.ndarray:
    """Sequential conditional draw; the output always sums to ``y``."""
    D = params.n_categories
    z = np.zeros(D, dtype=np.int64)
    left = int(params.y)
    for d in range(D - 1):
        if left == 0:
            break
        prob = rng.beta(params.nu[d] * params.phi[d], (1.0 - params.nu[d]) * params.phi[d])
        z[d] = rng.binomial(left, prob)
        left -= int(z[d])
    z[D - 1] = left
    return z
