"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

The lines are printed as each test runs (visible with ``-s``) and repeated in
the terminal summary. Long runs carry the ``slow`` marker; the 100-data-set
calibration needs ``GDMNOWCAST_FULL=1``.
"""

import datetime as dt
import math
import time

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import ndtr

from gdmnowcast.data import CensoredTriangle, ReportingTriangle
from gdmnowcast.distributions import (
    BetaBinParams,
    GDMParams,
    NegBinParams,
    betabin_logpmf,
    gdm_logpmf,
    gdm_sample,
    negbin_logpmf,
)
from gdmnowcast.experiment import RollingConfig, SimulationScenario, run_calibration, run_rolling, simulate_dataset
from gdmnowcast.mcmc import McmcConfig, run_chains
from gdmnowcast.mcmc.diagnostics import mcse
from gdmnowcast.model import ModelSpec, PriorSpec, relative_means_to_survivor, survivor_to_relative_means
from gdmnowcast.prediction import posterior_predictive_check

RESULTS: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def compositions(y, D):
    if D == 1:
        yield (y,)
        return
    for first in range(y + 1):
        for rest in compositions(y - first, D - 1):
            yield (first,) + rest


def multinomial_probs(nu):
    return np.diff(np.concatenate([[0.0], relative_means_to_survivor(nu), [1.0]]))


# 1 -------------------------------------------------------------------------------


def test_criterion_1_gdm_pmf_and_sampler():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    settings = [(rng.uniform(0.02, 0.98, 2), rng.uniform(0.2, 50.0, 2)) for _ in range(50)]
    worst = 0.0
    for nu, phi in settings:
        for D in (1, 2, 3):
            for y in range(7):
                p = GDMParams(nu[: D - 1], phi[: D - 1], y)
                total = math.fsum(math.exp(gdm_logpmf(c, p)) for c in compositions(y, D))
                worst = max(worst, abs(total - 1.0))
    # sampler frequencies against the pmf, 10^5 draws per setting; cells expecting
    # fewer than 5 draws get the exact-binomial equivalent of the normal z-score
    n_draws, max_z = 100_000, 0.0
    for nu, phi in settings[:5]:
        p = GDMParams(nu, phi, 6)
        comps = list(compositions(6, 3))
        index = {c: i for i, c in enumerate(comps)}
        counts = np.zeros(len(comps), dtype=int)
        for _ in range(n_draws):
            counts[index[tuple(gdm_sample(p, rng))]] += 1
        prob = np.exp([gdm_logpmf(c, p) for c in comps])
        for k, pr in zip(counts, prob):
            if n_draws * pr >= 5:
                z = abs(k - n_draws * pr) / math.sqrt(n_draws * pr * (1 - pr))
            else:
                z = stats.norm.isf(stats.binomtest(int(k), n_draws, pr).pvalue / 2)
            max_z = max(max_z, float(z))
    secs = time.perf_counter() - start
    report("1", worst < 1e-9 and max_z < 4 and secs < 60,
           f"max |sum pmf - 1| = {worst:.2e} (< 1e-9); max |z| = {max_z:.2f} (< 4) over 5 settings x 1e5 draws; "
           f"{secs:.0f} s (< 60)")


# 2 -------------------------------------------------------------------------------


def test_criterion_2a_betabinomial_to_binomial():
    # the exact gap is about (z(z-1)/nu + (n-z)(n-z-1)/(1-nu) - n(n-1)) / (2 phi),
    # so the support is kept to delay-cell sizes (n <= 20)
    gap = 0.0
    for nu in (0.05, 0.3, 0.5, 0.8, 0.95):
        for n in (1, 7, 20):
            z = np.arange(n + 1)
            ll = betabin_logpmf(z, BetaBinParams(nu, 1e7, n))
            gap = max(gap, float(np.max(np.abs(ll - stats.binom.logpmf(z, n, nu)))))
    report("2a", gap < 1e-3, f"Beta-Binomial vs Binomial at phi=1e7, n <= 20: max log-pmf gap {gap:.2e} (< 1e-3)")


def test_criterion_2b_gdm_to_multinomial():
    rng = np.random.default_rng(202)
    gap = 0.0
    for _ in range(10):
        nu = rng.uniform(0.05, 0.95, 3)
        p = GDMParams(nu, np.full(3, 1e7), 15)
        probs = multinomial_probs(nu)
        for c in compositions(15, 4):
            gap = max(gap, abs(gdm_logpmf(c, p) - stats.multinomial.logpmf(c, 15, probs)))
    report("2b", gap < 1e-3, f"GDM vs Multinomial at phi=1e7: max log-pmf gap {gap:.2e} (< 1e-3)")


def test_criterion_2c_negbin_to_poisson():
    # The exact gap is about (y(y-1)/2 - lam*y + lam^2/2) / theta: no exact
    # implementation meets 1e-4 once y reaches about 20.
    y = np.arange(31)
    gap = np.abs(negbin_logpmf(y, NegBinParams(5.0, 1e6)) - stats.poisson.logpmf(y, 5.0))
    report("2c", float(gap.max()) < 1e-4,
           f"NB vs Poisson at theta=1e6, y=0..30: max log-pmf gap {gap.max():.2e} (< 1e-4); "
           f"gap < 1e-4 for y <= {int(np.max(y[gap < 1e-4]))}")


# 3 -------------------------------------------------------------------------------


def test_criterion_3_survivor_round_trip():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10_000):
        S = np.sort(ndtr(rng.normal(0, 1.5, rng.integers(1, 9))))
        if np.any(np.diff(S) <= 0):
            continue
        nu = survivor_to_relative_means(S)
        worst = max(worst, float(np.max(np.abs(relative_means_to_survivor(nu) - S))))
    hand = survivor_to_relative_means([0.25, 0.5])
    exact = hand[0] == 0.25 and hand[1] == pytest.approx(1 / 3, abs=1e-15)
    report("3", worst < 1e-12 and exact,
           f"max round-trip error {worst:.1e} over 1e4 curves (< 1e-12); S=(0.25,0.5) -> nu={hand.tolist()}")


# 4 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_sampler_validity():
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    theta = 4.0
    y = rng.negative_binomial(theta, theta / (theta + 20.0), 30)
    ct = CensoredTriangle(ReportingTriangle(y[:, None, None], dt.date(2020, 1, 1), ("r",)), 29)
    spec = ModelSpec(d_max=1, f_terms=(), g_terms=(), priors=PriorSpec(theta_fixed=theta))
    s = run_chains(spec, ct, McmcConfig(n_chains=4, n_iterations=20_000, burn_in=10_000, thin=5))
    iota = s.draws["iota"][..., 0]

    def log_post(i):
        return stats.norm.logpdf(i, 0, 10) + stats.nbinom.logpmf(y, theta, theta / (theta + np.exp(i))).sum()

    mode = math.log(y.mean())
    shift = log_post(mode)
    w = lambda i: math.exp(log_post(i) - shift)  # noqa: E731
    lo, hi = mode - 2, mode + 2
    exact = integrate.quad(lambda i: i * w(i), lo, hi, limit=200)[0] / integrate.quad(w, lo, hi, limit=200)[0]
    z_quad = abs(iota.mean() - exact) / mcse(iota)

    sim = simulate_dataset(SimulationScenario(T=40, S=3, d_max=5, seed=3))
    data = CensoredTriangle(sim.triangle, 39)
    spec = ModelSpec(d_max=5, d_prime=3)
    cfg = McmcConfig(n_chains=4, n_iterations=12_000, burn_in=6_000, thin=5)
    a = run_chains(spec, data, cfg).draws["f.temporal.overall"]
    b = run_chains(spec, data, McmcConfig(**{**cfg.__dict__, "conjugate": False})).draws["f.temporal.overall"]
    z_conj = max(abs(a[..., k].mean() - b[..., k].mean()) / math.hypot(mcse(a[..., k]), mcse(b[..., k]))
                 for k in range(a.shape[-1]))
    secs = time.perf_counter() - start
    report("4", z_quad < 3 and z_conj < 3 and secs < 300,
           f"intercept mean {iota.mean():.5f} vs quadrature {exact:.5f} ({z_quad:.2f} MC SE, < 3); "
           f"conjugate vs Metropolis overall coefficients max {z_conj:.2f} MC SE (< 3); {secs:.0f} s (< 300)")


# 5 and 6 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def calibration_smoke():
    return run_calibration(10, McmcConfig.testing(n_chains=3), first_seed=500)


@pytest.mark.slow
def test_criterion_5_calibration_smoke(calibration_smoke):
    r = calibration_smoke
    in_window = 0.90 <= r.lambda_coverage <= 0.99
    print(f"  same-day nowcast coverage {r.nowcast_coverage:.3f} from {r.nowcast_hits.size} outcomes "
          f"(window checked on the 100-data-set run)")
    report("5s", r.seconds < 900 and in_window,
           f"10 data sets in {r.seconds / 60:.1f} min (< 15); lambda coverage {r.lambda_coverage:.3f} in [0.90, 0.99]; "
           f"nowcast coverage {r.nowcast_coverage:.3f}")


@pytest.mark.slow
def test_criterion_6_convergence_rule_smoke(calibration_smoke):
    r = calibration_smoke
    fr = [rep["lambda_fraction_below_threshold"] for rep in r.reports]
    report("6s", bool(r.converged.all()),
           f"pass rule met on {int(r.converged.sum())}/{len(r.converged)} data sets; "
           f"min lambda fraction {min(fr):.3f}")


@pytest.mark.slow
@pytest.mark.full
def test_criterion_5_6_calibration_full():
    r = run_calibration(100, McmcConfig.testing(n_chains=4), first_seed=1000)
    ok5 = 0.90 <= r.nowcast_coverage <= 0.99 and 0.90 <= r.lambda_coverage <= 0.99
    ok6 = bool(r.converged.all())
    report("5", ok5, f"100 data sets in {r.seconds / 3600:.1f} h; nowcast coverage {r.nowcast_coverage:.3f}, "
                     f"lambda coverage {r.lambda_coverage:.3f}, both in [0.90, 0.99]")
    report("6", ok6, f"pass rule met on {int(r.converged.sum())}/100 data sets")


# 7 and 8 ---------------------------------------------------------------------------


def speedup_scenario() -> SimulationScenario:
    # reporting within a day moves from about 50% to about 70% over two weeks
    return SimulationScenario(T=80, S=3, d_max=7, theta=10, phi=200, weekly_amplitude=0.3, speedup=0.524,
                              speedup_start=50, speedup_days=14, seed=7)


@pytest.fixture(scope="module")
def rolling_run():
    sim = simulate_dataset(speedup_scenario())
    cfg = RollingConfig(t0_start=60, n_days=20, models=("gdm", "nb", "window"), window=14,
                        spec=ModelSpec(d_max=7, d_prime=4),
                        mcmc=McmcConfig(n_chains=2, n_iterations=4000, burn_in=2000, thin=2))
    return run_rolling(sim.triangle, cfg, audit=True)


@pytest.mark.slow
def test_criterion_7_table_orderings(rolling_run):
    m = rolling_run.metrics
    print(m.render(0))
    g, n, w = (m.get(k) for k in ("gdm", "nb", "window-14"))
    widths = g.mean_piw < n.mean_piw < w.mean_piw
    bias = abs(g.bias) < w.bias
    cover = min(g.coverage95, n.coverage95, w.coverage95) >= 0.95
    report("7", widths and bias and cover,
           f"width gdm {g.mean_piw:.1f} < nb {n.mean_piw:.1f} < window-14 {w.mean_piw:.1f}: {widths}; "
           f"|bias| gdm {abs(g.bias):.1f} < window-14 {w.bias:.1f}: {bias}; "
           f"coverage {g.coverage95:.2f}/{n.coverage95:.2f}/{w.coverage95:.2f} all >= 0.95: {cover}")


@pytest.mark.slow
def test_criterion_8_no_future_leakage(rolling_run):
    n_fits = len(rolling_run.convergence)
    report("8", not rolling_run.leaks and n_fits == 60 and not rolling_run.failures,
           f"{len(rolling_run.leaks)} future cells read across {n_fits} audited fits")


# 9 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_ppc_discriminates():
    # fifteen sparse regions sharing a smooth log-scale wiggle
    scn = SimulationScenario(T=60, S=15, d_max=5, level=1.5, wave_amplitude=0.0, regional_trend_sd=0.0,
                             shared_noise_sd=0.3, shared_noise_days=6.0, theta=50, seed=1)
    sim = simulate_dataset(scn)
    ct = CensoredTriangle(sim.triangle, 59)
    cfg = McmcConfig(n_chains=2, n_iterations=10_000, burn_in=5_000, thin=5)
    joint = posterior_predictive_check(run_chains(ModelSpec(d_max=5, d_prime=3), ct, cfg), ct, "sample_variance")
    indep = posterior_predictive_check(run_chains(ModelSpec(d_max=5, d_prime=3, nested=False), ct, cfg), ct,
                                       "sample_variance")
    tail = min(indep.p_upper, 1 - indep.p_upper)
    report("9", joint.inside_central_95 and tail < 0.05,
           f"joint: observed variance {joint.observed:.0f}, upper-tail p {joint.p_upper:.3f} (inside central 95%: "
           f"{joint.inside_central_95}); independent: tail p {tail:.3f} (< 0.05)")


# 10 --------------------------------------------------------------------------------


@pytest.mark.skip(reason="needs the real surveillance data set, which is not shipped")
def test_criterion_10_real_data():
    pass
