import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gdmnowcast.distributions import (
    BetaBinParams,
    GDMParams,
    NegBinParams,
    betabin_logpmf,
    betabin_sample,
    gdm_logpmf,
    gdm_sample,
    negbin_logpmf,
    negbin_quantile,
    negbin_sample,
)
from gdmnowcast.model import relative_means_to_survivor


def compositions(y, D):
    for cut in itertools.combinations(range(y + D - 1), D - 1):
        parts, prev = [], -1
        for c in cut:
            parts.append(c - prev - 1)
            prev = c
        parts.append(y + D - 1 - prev - 1)
        yield np.array(parts)


# Negative-Binomial -----------------------------------------------------------


def test_negbin_zero_closed_form():
    lam, th = 3.7, 2.2
    assert negbin_logpmf(0, NegBinParams(lam, th)) == pytest.approx(th * np.log(th / (th + lam)), rel=1e-12)


def test_negbin_poisson_limit():
    # The exact log-pmf gap at this dispersion grows like y^2 / (2 theta) and
    # passes 1e-4 from y = 20 on, so this fails for any exact implementation.
    y = np.arange(31)
    np.testing.assert_allclose(negbin_logpmf(y, NegBinParams(5.0, 1e6)), stats.poisson.logpmf(y, 5.0), atol=1e-4)


def test_negbin_poisson_limit_pmf_scale():
    y = np.arange(31)
    np.testing.assert_allclose(np.exp(negbin_logpmf(y, NegBinParams(5.0, 1e6))), stats.poisson.pmf(y, 5.0), atol=1e-6)


def test_negbin_matches_high_precision_oracle():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    for lam, th in ((5.0, 1e6), (3.0, 2.0), (250.0, 0.7)):
        lm, tm = mp.mpf(lam), mp.mpf(th)
        for y in (0, 1, 7, 30, 400):
            exact = (mp.loggamma(y + tm) - mp.loggamma(tm) - mp.loggamma(y + 1) + tm * mp.log(tm / (tm + lm))
                     + y * mp.log(lm / (tm + lm)))
            assert negbin_logpmf(y, NegBinParams(lam, th)) == pytest.approx(float(exact), abs=1e-8)


def test_negbin_normalises():
    assert np.exp(negbin_logpmf(np.arange(2001), NegBinParams(3.0, 2.0))).sum() == pytest.approx(1.0, abs=1e-10)


def test_negbin_matches_scipy_parametrisation():
    y = np.arange(40)
    lam, th = 7.5, 3.0
    np.testing.assert_allclose(negbin_logpmf(y, NegBinParams(lam, th)), stats.nbinom.logpmf(y, th, th / (th + lam)),
                               rtol=1e-10)


def test_negbin_off_support():
    assert negbin_logpmf(-1, NegBinParams(2.0, 1.0)) == -np.inf
    assert negbin_logpmf(1.5, NegBinParams(2.0, 1.0)) == -np.inf


def test_negbin_moments(rng):
    x = negbin_sample(NegBinParams(4.0, 5.0), rng, size=100_000)
    se = np.sqrt(7.2 / x.size)
    assert abs(x.mean() - 4.0) < 3 * se
    assert abs(x.var() - 7.2) < 0.72


def test_negbin_quantile():
    p = NegBinParams(6.0, 2.5)
    assert negbin_quantile(p, 1e-12) == 0
    cdf = np.cumsum(np.exp(negbin_logpmf(np.arange(500), p)))
    assert negbin_quantile(p, 0.5) == int(np.argmax(cdf >= 0.5))
    for q in (0.025, 0.3, 0.9, 0.975):
        assert negbin_quantile(p, q) == int(np.argmax(cdf >= q))
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            negbin_quantile(p, bad)


def test_negbin_invalid_params():
    for lam, th in ((0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (np.inf, 1.0)):
        with pytest.raises(ValueError):
            NegBinParams(lam, th)
    assert NegBinParams(2.0, 4.0).variance == pytest.approx(3.0)


# Beta-Binomial --------------------------------------------------------------


def test_betabin_empty_trials():
    assert betabin_logpmf(0, BetaBinParams(0.4, 3.0, 0)) == 0.0


def test_betabin_binomial_limit():
    z = np.arange(21)
    np.testing.assert_allclose(betabin_logpmf(z, BetaBinParams(0.3, 1e7, 20)), stats.binom.logpmf(z, 20, 0.3),
                               atol=1e-4)


def test_betabin_normalises():
    assert np.exp(betabin_logpmf(np.arange(6), BetaBinParams(0.5, 2.0, 5))).sum() == pytest.approx(1.0, abs=1e-12)


def test_betabin_matches_scipy_shapes():
    z = np.arange(13)
    nu, phi = 0.35, 4.0
    np.testing.assert_allclose(betabin_logpmf(z, BetaBinParams(nu, phi, 12)),
                               stats.betabinom.logpmf(z, 12, nu * phi, (1 - nu) * phi), rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.1, 200.0), st.integers(1, 30))
def test_betabin_overdispersed(nu, phi, n):
    z = np.arange(n + 1)
    p = np.exp(betabin_logpmf(z, BetaBinParams(nu, phi, n)))
    mean = (p * z).sum()
    var = (p * z**2).sum() - mean**2
    assert mean == pytest.approx(n * nu, rel=1e-8)
    assert var > n * nu * (1 - nu) * (1 - 1e-9)


def test_betabin_errors():
    with pytest.raises(ValueError):
        betabin_logpmf(6, BetaBinParams(0.5, 1.0, 5))
    with pytest.raises(ValueError):
        betabin_logpmf(-1, BetaBinParams(0.5, 1.0, 5))
    for nu, phi, n in ((0.0, 1.0, 3), (1.0, 1.0, 3), (0.5, 0.0, 3), (0.5, 1.0, -1)):
        with pytest.raises(ValueError):
            BetaBinParams(nu, phi, n)


def test_betabin_sample_support(rng):
    p = BetaBinParams(0.2, 1.5, 9)
    draws = [betabin_sample(p, rng) for _ in range(500)]
    assert min(draws) >= 0 and max(draws) <= 9
    assert betabin_sample(BetaBinParams(0.2, 1.5, 0), rng) == 0


# GDM ----------------------------------------------------------------------------


def test_gdm_single_category():
    assert gdm_logpmf([7], GDMParams(np.zeros(0), np.zeros(0), 7)) == 0.0


def test_gdm_normalises_over_compositions(rng):
    p = GDMParams(rng.uniform(0.05, 0.95, 2), rng.uniform(0.5, 20, 2), 6)
    comps = list(compositions(6, 3))
    assert len(comps) == 28
    assert sum(np.exp(gdm_logpmf(c, p)) for c in comps) == pytest.approx(1.0, abs=1e-10)


def test_gdm_multinomial_limit(rng):
    nu = rng.uniform(0.1, 0.9, 3)
    p = GDMParams(nu, np.full(3, 1e7), 12)
    probs = np.diff(np.concatenate([[0.0], relative_means_to_survivor(nu[None, :])[0], [1.0]]))
    for c in list(compositions(12, 4))[::17]:
        assert gdm_logpmf(c, p) == pytest.approx(stats.multinomial.logpmf(c, 12, probs), abs=1e-3)


def test_gdm_sum_constraint(rng):
    p = GDMParams([0.5, 0.5], [2.0, 2.0], 5)
    with pytest.raises(ValueError):
        gdm_logpmf([1, 1, 1], p)
    with pytest.raises(ValueError):
        gdm_logpmf([1, 4], p)
    with pytest.raises(ValueError):
        gdm_logpmf([-1, 5, 1], p)


def test_gdm_param_validation():
    with pytest.raises(ValueError):
        GDMParams([0.5, 1.0], [1.0, 1.0], 3)
    with pytest.raises(ValueError):
        GDMParams([0.5], [1.0, 1.0], 3)
    with pytest.raises(ValueError):
        GDMParams([0.5], [0.0], 3)
    with pytest.raises(ValueError):
        GDMParams([0.5], [1.0], -2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 300), st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.integers(0, 2**31))
def test_gdm_sample_sums_to_total(y, nu, seed):
    rng = np.random.default_rng(seed)
    z = gdm_sample(GDMParams(nu, np.full(len(nu), 3.0), y), rng)
    assert z.sum() == y and np.all(z >= 0) and z.size == len(nu) + 1


def test_gdm_zero_total(rng):
    np.testing.assert_array_equal(gdm_sample(GDMParams([0.3, 0.6], [2.0, 2.0], 0), rng), [0, 0, 0])


def test_gdm_law_of_large_numbers(rng):
    z = gdm_sample(GDMParams([0.5], [1e7], 10_000), rng)
    assert abs(z[0] / 10_000 - 0.5) < 0.02
