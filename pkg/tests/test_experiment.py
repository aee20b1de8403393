import csv
import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from gdmnowcast.experiment import (
    PredictionRecord,
    RollingConfig,
    SimulationScenario,
    compute_metrics,
    run_rolling,
    simulate_dataset,
)
from gdmnowcast.mcmc import McmcConfig
from gdmnowcast.model import ModelSpec

TINY = McmcConfig(n_chains=1, n_iterations=120, burn_in=60, thin=3)


# simulator ---------------------------------------------------------------------


def test_scenario_validation():
    with pytest.raises(ValueError):
        SimulationScenario(theta=0)
    with pytest.raises(ValueError):
        SimulationScenario(S=2, regional_offsets=(0.0,))
    with pytest.raises(ValueError):
        SimulationScenario(d_max=3, delay_curve=(0.6, 0.5))
    scn = SimulationScenario(T=30, seed=4)
    assert SimulationScenario.from_dict(scn.to_dict()) == scn


def test_simulation_is_deterministic():
    a = simulate_dataset(SimulationScenario(T=50, S=3, seed=8))
    b = simulate_dataset(SimulationScenario(T=50, S=3, seed=8))
    c = simulate_dataset(SimulationScenario(T=50, S=3, seed=9))
    np.testing.assert_array_equal(a.triangle.z, b.triangle.z)
    assert not np.array_equal(a.triangle.z, c.triangle.z)
    np.testing.assert_array_equal(a.triangle.y, a.y)


def test_reporting_fractions_homogeneous_over_weekdays():
    scn = SimulationScenario(T=5000, S=2, weekly_amplitude=0.0, speedup=0.0, wave_period=400, seed=21)
    sim = simulate_dataset(scn)
    z = sim.triangle.z
    y = z.sum(axis=2)
    ok = y > 0
    frac = np.where(ok, z[..., 0] / np.maximum(y, 1), np.nan)
    dow = np.array([d.weekday() for d in sim.triangle.dates])
    groups = [frac[dow == k][ok[dow == k]] for k in range(7)]
    assert stats.kruskal(*groups).pvalue > 0.01
    # same check on the week-day pooled cumulative fraction after two delays
    frac2 = np.where(ok, z[..., :2].sum(axis=2) / np.maximum(y, 1), np.nan)
    assert stats.kruskal(*[frac2[dow == k][ok[dow == k]] for k in range(7)]).pvalue > 0.01


def test_weekly_cycle_is_detected():
    scn = SimulationScenario(T=2000, S=2, weekly_amplitude=0.3, seed=21)
    sim = simulate_dataset(scn)
    z, y = sim.triangle.z, sim.triangle.y
    frac = z[..., 0] / np.maximum(y, 1)
    dow = np.array([d.weekday() for d in sim.triangle.dates])
    assert stats.kruskal(*[frac[dow == k].ravel() for k in range(7)]).pvalue < 1e-6


def test_poisson_multinomial_limit():
    scn = SimulationScenario(T=4000, S=1, regional_offsets=(0.0,), wave_amplitude=0.0, regional_trend_sd=0.0,
                             weekly_amplitude=0.0, theta=1e6, phi=1e6, seed=2)
    sim = simulate_dataset(scn)
    y = sim.triangle.y[:, 0]
    assert y.var(ddof=1) / y.mean() == pytest.approx(1.0, abs=0.08)
    # first-delay split is binomial given the total: dispersion index near one
    p = sim.nu[0, 0, 0]
    z0 = sim.triangle.z[:, 0, 0]
    disp = np.sum((z0 - y * p) ** 2 / (y * p * (1 - p))) / len(y)
    assert disp == pytest.approx(1.0, abs=0.08)


def test_overdispersed_default_is_not_poisson():
    scn = SimulationScenario(T=4000, S=1, regional_offsets=(0.0,), wave_amplitude=0.0, regional_trend_sd=0.0,
                             weekly_amplitude=0.0, theta=10, seed=2)
    y = simulate_dataset(scn).triangle.y[:, 0]
    assert y.var(ddof=1) / y.mean() > 3


# metrics -------------------------------------------------------------------------


def _rec(model, region, t, med, lo, hi):
    return PredictionRecord(model, region, t, t, med, lo, hi)


HAND = [("a", 1, 10, 5, 15, 12), ("a", 2, 20, 18, 22, 25), ("b", 1, 7, 7, 9, 7), ("b", 2, 30, 20, 40, 26)]


def test_hand_computed_metrics():
    preds = [_rec("m", r, t, med, lo, hi) for r, t, med, lo, hi, _ in HAND]
    truth = {(r, t): y for r, t, *_, y in HAND}
    tab = compute_metrics(preds, truth)
    o = tab.get("m")
    assert o.rmse == pytest.approx(math.sqrt(11.25))
    assert o.bias == pytest.approx(-0.75)
    assert o.mean_piw == pytest.approx(9.0)
    assert o.coverage95 == pytest.approx(0.75)
    assert o.n == 4
    a = tab.get("m", "a")
    assert (a.rmse, a.bias, a.mean_piw, a.coverage95) == pytest.approx((math.sqrt(14.5), -3.5, 7.0, 0.5))
    b = tab.get("m", "b")
    assert b.coverage95 == 1.0  # inclusive boundary


def test_metrics_perfect_and_full_cover():
    truth = {("a", t): 10.0 * t for t in range(5)}
    perfect = compute_metrics([_rec("m", "a", t, 10.0 * t, 0, 1) for t in range(5)], truth).get("m")
    assert perfect.rmse == 0 and perfect.bias == 0
    cover = compute_metrics([_rec("m", "a", t, 3.0, -1e9, 1e9) for t in range(5)], truth).get("m")
    assert cover.coverage95 == 1.0


def test_metrics_permutation_invariant_and_callable_truth(rng):
    preds = [_rec("m", r, t, med, lo, hi) for r, t, med, lo, hi, _ in HAND]
    truth = {(r, t): y for r, t, *_, y in HAND}
    a = compute_metrics(preds, truth)
    b = compute_metrics([preds[i] for i in rng.permutation(4)], lambda r, t: truth[(r, t)])
    assert a.rows == b.rows


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        compute_metrics([_rec("m", "a", 1, 1, 0, 2)], {("a", 2): 1})


def test_render_and_csv(tmp_path):
    preds = [_rec(m, r, t, med, lo, hi) for m in ("gdm", "nb") for r, t, med, lo, hi, _ in HAND]
    tab = compute_metrics(preds, {(r, t): y for r, t, *_, y in HAND})
    text = tab.render()
    for title in ("RMSE", "Bias", "Mean 95% Prediction Interval Width", "95% Prediction Interval Coverage"):
        assert title in text
    assert "overall" in text and "-0.75" not in text  # rounded at render time only
    tab.write_csv(tmp_path / "m.csv")
    rows = list(csv.DictReader((tmp_path / "m.csv").open()))
    assert len(rows) == len(tab.rows)
    assert float(rows[0]["rmse"]) == pytest.approx(tab.rows[0].rmse, rel=1e-5)


# rolling harness -------------------------------------------------------------------


def test_rolling_config_validation():
    with pytest.raises(ValueError):
        RollingConfig(t0_start=35, n_days=10).validate(40)
    with pytest.raises(ValueError):
        RollingConfig(t0_start=5, models=("inla",)).validate(40)
    with pytest.raises(ValueError):
        RollingConfig(t0_start=5, n_days=0).validate(40)
    assert RollingConfig(t0_start=5, window=14).label("window") == "window-14"


def test_single_day_counts_and_no_leaks(small_sim):
    tri = small_sim.triangle
    cfg = RollingConfig(t0_start=30, n_days=1, models=("gdm", "nb", "window"), horizon=2, mcmc=TINY,
                        spec=ModelSpec(d_max=5, d_prime=3))
    res = run_rolling(tri, cfg)
    assert not res.failures and not res.leaks
    per_model = {}
    for p in res.archive:
        per_model[p.model] = per_model.get(p.model, 0) + 1
        assert p.t0 == 30
    assert per_model == {m: 1 * (5 + 2) * 2 for m in ("gdm", "nb", "window")}
    assert len(res.convergence) == 3


def test_rolling_archive_counts_and_scoring(small_sim, tmp_path):
    tri = small_sim.triangle
    cfg = RollingConfig(t0_start=33, n_days=3, models=("gdm", "rw"), mcmc=TINY, spec=ModelSpec(d_max=5, d_prime=3))
    res = run_rolling(tri, cfg)
    assert not res.leaks
    for m in ("gdm", "rw"):
        assert sum(p.model == m for p in res.archive) == 3 * 5 * 2
        assert res.metrics.get(m, "overall", 0).n == 3 * 2
    res.write_archive(tmp_path / "a.csv")
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert len(rows) == len(res.archive)
    # scored against the final totals of the full triangle
    p = next(p for p in res.archive if p.lead == -4)
    assert p.median == tri.y[p.t, tri.regions.index(p.region)]


def test_rolling_failure_is_recorded(small_sim, monkeypatch):
    import gdmnowcast.experiment as ex

    real = ex.fit_model

    def flaky(name, *a, **k):
        if name == "nb":
            raise RuntimeError("boom")
        return real(name, *a, **k)

    monkeypatch.setattr(ex, "fit_model", flaky)
    cfg = RollingConfig(t0_start=34, n_days=2, models=("gdm", "nb"), mcmc=TINY, spec=ModelSpec(d_max=5, d_prime=3))
    res = run_rolling(small_sim.triangle, cfg)
    assert len(res.failures) == 2 and all(f["model"] == "nb" for f in res.failures)
    assert res.metrics.models == ["gdm"]


def test_prediction_record_lead():
    r = PredictionRecord("m", "a", 10, 8, 1, 0, 2)
    assert r.lead == -2
    assert dataclasses.asdict(r)["t0"] == 10
