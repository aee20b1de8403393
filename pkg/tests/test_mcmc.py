import datetime as dt

import numpy as np
import pytest

from gdmnowcast import kernels
from gdmnowcast.data import CensoredTriangle, ReportingTriangle
from gdmnowcast.distributions import BetaBinParams, NegBinParams, betabin_logpmf, negbin_logpmf
from gdmnowcast.mcmc import (
    GDMChain,
    InitialisationError,
    McmcConfig,
    PosteriorSamples,
    convergence_report,
    ess,
    mcse,
    psrf,
    psrf_array,
    run_chains,
    sample_latent_total,
)
from gdmnowcast.mcmc.adapt import BlockCovariance, rm_gain
from gdmnowcast.mcmc.engine import initial_parameter_state
from gdmnowcast.model import Model, ModelSpec, ParameterState, TermSpec, prepare_data

D0 = dt.date(2021, 6, 7)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_defaults_and_budget():
    c = McmcConfig()
    assert (c.n_chains, c.n_iterations, c.burn_in, c.thin) == (4, 200_000, 100_000, 10)
    assert (c.target_scalar, c.target_block) == (0.44, 0.234)
    assert c.n_keep == 10_000
    t = McmcConfig.testing()
    assert (t.n_iterations, t.burn_in, t.thin, t.n_keep) == (20_000, 10_000, 5, 2000)


@pytest.mark.parametrize("kw", [{"burn_in": 10, "n_iterations": 10}, {"thin": 0}, {"n_chains": 0},
                                {"latent_z": "marginal"}])
def test_config_validation(kw):
    base = dict(n_iterations=100, burn_in=50)
    base.update(kw)
    with pytest.raises(ValueError):
        McmcConfig(**base)


def test_rm_gain_decays():
    g = [rm_gain(i) for i in range(0, 10_000, 500)]
    assert all(a >= b for a, b in zip(g, g[1:])) and g[0] == 0.5 and g[-1] == pytest.approx(3 / 9501**0.6)


def test_block_covariance_matches_numpy(rng):
    x = rng.normal(size=(300, 2, 4))
    bc = BlockCovariance(2, 4)
    for row in x:
        bc.add(row)
    for s in range(2):
        np.testing.assert_allclose(bc.cov(slice(0, 4))[s], np.cov(x[:, s].T), atol=1e-12)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def test_psrf_iid(rng):
    r, deg = psrf(rng.standard_normal((2, 10_000)))
    assert 0.99 <= r <= 1.02 and not deg


def test_psrf_separated(rng):
    x = np.stack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
    assert psrf(x)[0] > 2


def test_psrf_constant_chains():
    r, deg = psrf(np.full((3, 50), 2.5))
    assert r == 1.0 and deg
    r2, deg2 = psrf(np.stack([np.full(50, 1.0), np.full(50, 2.0)]))
    assert r2 == np.inf and deg2


def test_psrf_needs_chains_and_draws(rng):
    with pytest.raises(ValueError):
        psrf(rng.normal(size=(1, 100)))
    with pytest.raises(ValueError):
        psrf(rng.normal(size=(2, 5)))


def test_psrf_array_matches_scalar(rng):
    x = rng.normal(size=(4, 200, 3, 2))
    r, _ = psrf_array(x)
    assert r[1, 0] == pytest.approx(psrf(x[:, :, 1, 0])[0])


def test_ess_and_mcse(rng):
    iid = rng.standard_normal(20_000)
    assert 0.8 * iid.size < ess(iid) < 1.2 * iid.size
    ar = np.zeros(20_000)
    for i in range(1, ar.size):
        ar[i] = 0.9 * ar[i - 1] + rng.standard_normal()
    # AR(1) with rho = 0.9 has integrated autocorrelation time 19
    assert ess(ar) == pytest.approx(ar.size / 19, rel=0.35)
    assert mcse(iid) == pytest.approx(1 / np.sqrt(iid.size), rel=0.15)


def _fake_samples(lam, theta):
    return PosteriorSamples({"lambda": lam, "theta": theta, "y": lam.astype(np.int64)}, {}, [])


def test_report_duplicated_chains(rng):
    one = np.full((1, 100, 5, 2), 3.0)
    rep = convergence_report(_fake_samples(np.repeat(one, 4, axis=0), np.full((4, 100, 2), 20.0)))
    assert rep.passed and rep.lambda_degenerate.all() and rep.theta_degenerate.all()


def test_report_insufficient_draws(rng):
    rep = convergence_report(_fake_samples(rng.normal(size=(4, 2, 5, 2)), rng.normal(size=(4, 2, 2))))
    assert not rep.passed and "insufficient" in rep.reason


def test_report_rule(rng):
    lam = rng.normal(size=(4, 400, 10, 10))
    th = rng.normal(size=(4, 400, 2))
    assert convergence_report(_fake_samples(lam, th)).passed
    bad = lam.copy()
    bad[0, :, :1, :] += 10.0  # 10% of lambdas disagree across chains
    rep = convergence_report(_fake_samples(bad, th))
    assert not rep.passed and rep.lambda_fraction_ok == pytest.approx(0.9)
    th_bad = th.copy()
    th_bad[1, :, 0] += 5.0
    assert not convergence_report(_fake_samples(lam, th_bad)).passed


# ---------------------------------------------------------------------------
# latent totals
# ---------------------------------------------------------------------------


def test_latent_without_observed_delays_is_negbin(rng):
    lam, th = 7.0, 3.0
    n = 100_000
    u = 1.0 - rng.random(n)
    floor = np.zeros(n, np.int64)
    draws = kernels.sample_latent_rows(floor, np.full(n, np.log(lam)), np.full(n, th), np.zeros(n, np.int64),
                                       np.zeros((n, 1), np.int64), np.ones((n, 1)), np.ones((n, 1)), np.ones((n, 1)),
                                       np.full(n, -1, np.int64), np.zeros(n), np.full(n, 60, np.int64), u)
    support = np.arange(draws.max() + 1)
    cdf = np.cumsum(np.exp(negbin_logpmf(support, NegBinParams(lam, th))))
    ecdf = np.searchsorted(np.sort(draws), support, side="right") / n
    ks = np.max(np.abs(ecdf - cdf))
    assert ks < 1.63 / np.sqrt(n)  # 1% critical value


def test_latent_conditional_matches_joint_enumeration():
    lam, th, z1, nu1, phi1 = 2.0, 5.0, 1, 0.4, 6.0
    lw = kernels.latent_row_logweights(z1, np.log(lam), th, 1, [z1], [1 - nu1], [phi1])
    ys = np.arange(z1, z1 + lw.size)
    joint = np.array([negbin_logpmf(y, NegBinParams(lam, th)) + betabin_logpmf(z1, BetaBinParams(nu1, phi1, y))
                      for y in ys])
    oracle = joint - np.logaddexp.reduce(joint)
    mass = np.exp(oracle) > 1e-300
    np.testing.assert_allclose(np.exp(lw[mass]), np.exp(oracle[mass]), atol=1e-10)


def test_latent_numba_and_numpy_agree(rng):
    R = 400
    floor = rng.integers(0, 40, R)
    k = rng.integers(0, 4, R)
    z = rng.integers(0, 5, (R, 3))
    floor = np.maximum(floor, z.sum(axis=1))
    args = (floor, rng.normal(3, 0.5, R), rng.uniform(2, 80, R), k, z, np.full((R, 3), 0.3),
            rng.uniform(0.2, 0.9, (R, 3)), rng.uniform(2, 60, (R, 3)), np.full(R, -1, np.int64), np.zeros(R),
            floor + 50, 1.0 - rng.random(R))
    np.testing.assert_array_equal(kernels.sample_latent_rows_jit(*args), kernels.sample_latent_rows_np(*args))


def test_sample_latent_total_fully_observed(small_sim, rng):
    ct = CensoredTriangle(small_sim.triangle, small_sim.triangle.n_times - 1)
    m = Model.for_data(ModelSpec(d_max=ct.d_max, d_prime=3), ct)
    st = initial_parameter_state(m, prepare_data(m, ct))
    assert sample_latent_total(m, st, ct, 0, 1, rng) == small_sim.triangle.y[0, 1]
    t = ct.t0
    draws = [sample_latent_total(m, st, ct, t, 0, rng) for _ in range(200)]
    assert min(draws) >= ct.partial_sums()[t, 0]


def test_thinning_cap_degenerate_returns_floor():
    out = kernels.sample_latent_rows(np.array([9]), np.array([2.0]), np.array([5.0]), np.array([0]),
                                     np.zeros((1, 1), np.int64), np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)),
                                     np.array([9]), np.array([0.0]), np.array([20]), np.array([0.999]))
    assert out[0] == 9


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

SMALL = McmcConfig(n_chains=2, n_iterations=800, burn_in=400, thin=4, log_every=200)


@pytest.fixture(scope="module")
def small_fit(small_ct):
    spec = ModelSpec(d_max=small_ct.d_max, d_prime=3)
    return run_chains(spec, small_ct, SMALL, return_states=True)


def test_retained_draw_shapes(small_fit, small_ct):
    samples, states = small_fit
    T, S = small_ct.n_rows, small_ct.n_regions
    assert samples["lambda"].shape == (2, SMALL.n_keep, T, S)
    assert samples["theta"].shape == (2, SMALL.n_keep, S)
    assert samples.meta["seeds"] == [0, 1]
    assert len(states) == 2 and isinstance(states[0], ParameterState)


def test_latent_totals_respect_partial_sums(small_fit, small_ct):
    y = small_fit[0]["y"]
    assert np.all(y >= small_ct.partial_sums()[None, None])
    full = small_ct.fully_observed[: small_ct.n_rows]
    np.testing.assert_array_equal(y[:, :, full], np.broadcast_to(small_ct.observed_totals()[full], y[:, :, full].shape))


def test_adaptation_frozen_after_burn_in(small_fit):
    for log in small_fit[0].adaptation:
        snaps = [s for s in log["snapshots"] if s["phase"] == "burn_in_end"]
        after = [s for s in log["snapshots"] if s["phase"] == "sampling"]
        assert len(snaps) == 1 and after
        for s in after:
            assert s["scales"] == snaps[0]["scales"]
        assert log["final_scales"] == snaps[0]["scales"]


def test_fixed_seed_is_deterministic(small_ct, small_fit):
    spec = ModelSpec(d_max=small_ct.d_max, d_prime=3)
    again = run_chains(spec, small_ct, SMALL)
    for name in small_fit[0].draws:
        np.testing.assert_array_equal(again[name], small_fit[0][name])


def test_other_seed_differs(small_ct, small_fit):
    spec = ModelSpec(d_max=small_ct.d_max, d_prime=3)
    other = run_chains(spec, small_ct, McmcConfig(**{**SMALL.__dict__, "master_seed": 7}))
    assert not np.array_equal(other["lambda"], small_fit[0]["lambda"])


def test_samples_file_round_trip(small_fit, tmp_path):
    s = small_fit[0]
    s.save(tmp_path / "s.bin")
    back = PosteriorSamples.load(tmp_path / "s.bin")
    assert back.meta == s.meta
    for name in s.draws:
        np.testing.assert_array_equal(back[name], s[name])
        assert back[name].dtype == s[name].dtype
    (tmp_path / "bad.bin").write_bytes(b"not a samples file")
    with pytest.raises(ValueError):
        PosteriorSamples.load(tmp_path / "bad.bin")


def test_json_progress_log(small_ct, tmp_path):
    import json

    path = tmp_path / "log.jsonl"
    cfg = McmcConfig(n_chains=1, n_iterations=300, burn_in=100, thin=5, log_every=100, log_path=str(path))
    run_chains(ModelSpec(d_max=small_ct.d_max, d_prime=3), small_ct, cfg)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["event"] for r in recs] == ["progress"] * 3 + ["done"]
    assert recs[-1]["seed"] == 0 and "accept" in recs[-1]


def test_warm_start_from_previous_states(small_sim, small_fit):
    ct = CensoredTriangle(small_sim.triangle, small_sim.triangle.n_times - 2)
    spec = ModelSpec(d_max=ct.d_max, d_prime=3)
    out = run_chains(spec, ct, McmcConfig(n_chains=2, n_iterations=200, burn_in=100, thin=5), init=small_fit[1])
    assert out["lambda"].shape[2] == ct.n_rows


def test_initialisation_failure_dumps_state(small_ct):
    m = Model.for_data(ModelSpec(d_max=small_ct.d_max, d_prime=3), small_ct)
    fd = prepare_data(m, small_ct)
    bad = initial_parameter_state(m, fd)
    bad.theta = -bad.theta
    cfg = McmcConfig(n_chains=1, n_iterations=10, burn_in=5, max_init_tries=5)
    with pytest.raises(InitialisationError) as info:
        GDMChain(m, fd, cfg, 0, init=bad)
    assert isinstance(info.value.state, ParameterState)


def test_scalar_acceptance_after_adaptation(small_ct):
    spec = ModelSpec(d_max=small_ct.d_max, d_prime=3)
    cfg = McmcConfig(n_chains=1, n_iterations=8000, burn_in=6000, thin=10, log_every=0)
    s = run_chains(spec, small_ct, cfg)
    acc = s.adaptation[0]["acceptance"]
    for name in ("iota", "theta", "psi", "phi"):
        rates = np.asarray(acc[name], dtype=float).ravel()
        assert np.all((rates >= 0.2) & (rates <= 0.7)), (name, rates)


def test_hazard_link_and_non_nested_run(small_ct):
    for spec in (ModelSpec(d_max=small_ct.d_max, d_prime=3, link="hazard_logit"),
                 ModelSpec(d_max=small_ct.d_max, d_prime=3, nested=False,
                           g_terms=(TermSpec("temporal"), TermSpec("weekly")))):
        s = run_chains(spec, small_ct, McmcConfig(n_chains=1, n_iterations=300, burn_in=150, thin=5))
        assert np.all(np.isfinite(s["lambda"]))


def test_missing_cells_are_imputed(small_sim):
    tri = small_sim.triangle
    miss = np.zeros(tri.z.shape, bool)
    miss[30, 0, 1] = True
    ct = CensoredTriangle(ReportingTriangle(tri.z, tri.time_origin, tri.regions, miss), tri.n_times - 1)
    s = run_chains(ModelSpec(d_max=ct.d_max, d_prime=3), ct, McmcConfig(n_chains=1, n_iterations=400, burn_in=200,
                                                                       thin=2))
    zm = s["z_missing"]
    assert zm.shape[-1] == 1 and np.all(zm >= 0)
    assert np.all(s["y"][0, :, 30, 0] >= tri.z[30, 0].sum() - tri.z[30, 0, 1] + zm[0, :, 0])
