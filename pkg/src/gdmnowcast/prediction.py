"""Nowcasts, forecasts, regional aggregates and posterior predictive checks.

Every model family stores draws of the row totals ``y`` for rows ``0..t0``
(already conditioned on the visible cells). Rows past ``t0`` are simulated
per retained draw by a family-specific forecaster registered in
:data:`FORECASTERS`.
"""

from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import CensoredTriangle
from .mcmc.samples import PosteriorSamples
from .model import Model, ModelSpec

__all__ = [
    "QUANTILE_LEVELS",
    "QUANTILE_COLUMNS",
    "CSV_HEADER",
    "NowcastResult",
    "predict_totals",
    "aggregate",
    "PPCResult",
    "posterior_predictive_check",
    "quantiles",
    "FORECASTERS",
    "REPLICATORS",
]

QUANTILE_LEVELS = (0.025, 0.1, 0.175, 0.25, 0.5, 0.75, 0.825, 0.9, 0.975)
QUANTILE_COLUMNS = tuple(f"q{round(q * 1000):03d}" for q in QUANTILE_LEVELS)
CSV_HEADER = ("region", "date", "kind") + QUANTILE_COLUMNS + ("median", "observed_partial_sum")

# family -> f(samples, data, future_rows, rng) -> (n_draws, len(rows), S) totals
FORECASTERS: dict[str, Callable] = {}
# family -> f(samples, rows, rng) -> (n_draws, len(rows), S) replicated totals
REPLICATORS: dict[str, Callable] = {}


def quantiles(draws: np.ndarray, levels=QUANTILE_LEVELS, axis: int = 0) -> np.ndarray:
    """Type-7 (linear interpolation) sample quantiles, levels on the leading axis."""
    return np.quantile(np.asarray(draws, dtype=float), levels, axis=axis, method="linear")


@dataclass
class NowcastResult:
    """Predictive draws of row totals, ``draws[i, r, s]`` for draw ``i`` of row ``rows[r]``."""

    draws: np.ndarray
    rows: np.ndarray
    t0: int
    time_origin: dt.date
    regions: tuple[str, ...]
    observed_partial: np.ndarray
    _q: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.draws = np.asarray(self.draws)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.draws.ndim != 3 or self.draws.shape[1:] != (len(self.rows), len(self.regions)):
            raise ValueError(f"draws shape {self.draws.shape} does not match {len(self.rows)} rows x {len(self.regions)} regions")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def kinds(self) -> list[str]:
        return ["backfill" if t < self.t0 else "nowcast" if t == self.t0 else "forecast" for t in self.rows]

    @property
    def dates(self) -> list[dt.date]:
        return [self.time_origin + dt.timedelta(days=int(t)) for t in self.rows]

    @property
    def quantiles(self) -> np.ndarray:
        """(levels, rows, regions) type-7 quantiles."""
        if self._q is None:
            self._q = quantiles(self.draws)
        return self._q

    @property
    def median(self) -> np.ndarray:
        return self.quantiles[QUANTILE_LEVELS.index(0.5)]

    @property
    def variance(self) -> np.ndarray:
        """Sample variance of the predictive draws per (row, region)."""
        return self.draws.var(axis=0, ddof=1)

    def index(self, t: int) -> int:
        hit = np.nonzero(self.rows == t)[0]
        if not len(hit):
            raise KeyError(f"row {t} not in result")
        return int(hit[0])

    def select(self, mask) -> NowcastResult:
        mask = np.asarray(mask)
        return NowcastResult(self.draws[:, mask], self.rows[mask], self.t0, self.time_origin, self.regions,
                             self.observed_partial[mask])

    def records(self):
        """One dict per (row, region) in CSV column order."""
        q = self.quantiles
        med = self.median
        for r, (t, date, kind) in enumerate(zip(self.rows, self.dates, self.kinds)):
            for s, name in enumerate(self.regions):
                rec = {"region": name, "date": date.isoformat(), "kind": kind}
                for j, col in enumerate(QUANTILE_COLUMNS):
                    rec[col] = float(q[j, r, s])
                rec["median"] = float(med[r, s])
                rec["observed_partial_sum"] = int(self.observed_partial[r, s])
                yield rec

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
            w.writeheader()
            for rec in self.records():
                w.writerow({k: _fmt(v) for k, v in rec.items()})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}" if v != int(v) else str(int(v))
    return v


def _default_rng(samples: PosteriorSamples) -> np.random.Generator:
    seed = samples.meta.get("config", {}).get("master_seed", 0)
    return np.random.default_rng([int(seed), 0x5EED])


def predict_totals(samples: PosteriorSamples, data: CensoredTriangle, horizon: int = 0, *,
                   first_row: int = 0, rng: np.random.Generator | None = None) -> NowcastResult:
    """Predictive distribution of row totals for rows ``first_row..t0+horizon``.

    Rows up to ``t0`` use the retained latent totals; later rows are simulated
    from each retained draw by the family's forecaster. Without an ``rng`` the
    forecast stream is derived from the fit's master seed, so repeated calls
    agree.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    t0 = int(samples.meta.get("t0", data.t0))
    if t0 != data.t0:
        raise ValueError(f"samples were fit at t0={t0} but data is censored at t0={data.t0}")
    if not 0 <= first_row <= t0:
        raise ValueError("first_row must lie in 0..t0")
    rng = _default_rng(samples) if rng is None else rng
    y = samples.flat("y")[:, first_row:t0 + 1]
    partial = data.partial_sums()[first_row:t0 + 1]
    if np.any(y < partial[None]):
        raise ValueError("retained totals fall below the observed partial sums")
    draws = y
    if horizon:
        fut = np.arange(t0 + 1, t0 + 1 + horizon)
        fc = FORECASTERS.get(samples.family)
        if fc is None:
            _load_family_hooks()
            fc = FORECASTERS.get(samples.family)
        if fc is None:
            raise ValueError(f"no forecaster registered for model family {samples.family!r}")
        draws = np.concatenate([y, fc(samples, data, fut, rng).astype(y.dtype)], axis=1)
        partial = np.concatenate([partial, np.zeros((horizon, partial.shape[1]), dtype=partial.dtype)])
    rows = np.arange(first_row, t0 + 1 + horizon)
    return NowcastResult(draws, rows, t0, data.time_origin, tuple(data.regions), partial)


def aggregate(result: NowcastResult, regions=None, name: str | None = None) -> NowcastResult:
    """Draw-wise sum over a subset of regions (all by default)."""
    if regions is None:
        idx = list(range(len(result.regions)))
    else:
        idx = [r if isinstance(r, (int, np.integer)) else result.regions.index(r) for r in regions]
    if not idx:
        raise ValueError("empty region subset")
    label = name or "+".join(result.regions[i] for i in idx)
    return NowcastResult(result.draws[:, :, idx].sum(axis=2, keepdims=True), result.rows, result.t0,
                         result.time_origin, (label,), result.observed_partial[:, idx].sum(axis=1, keepdims=True))


def aggregate_draws(draws: list[np.ndarray]) -> np.ndarray:
    """Sum per-region draw arrays that must be aligned by (chain, iteration)."""
    shapes = {np.shape(d) for d in draws}
    if len(shapes) != 1:
        raise ValueError(f"misaligned draw arrays: {sorted(shapes)}")
    return np.sum(np.stack(draws), axis=0)


# ---------------------------------------------------------------------------
# joint-model forecaster
# ---------------------------------------------------------------------------


def _gdm_log_lambda(samples: PosteriorSamples, rows: np.ndarray) -> np.ndarray:
    """(n_draws, len(rows), S) log-means at arbitrary rows from the smooth-term draws."""
    spec = ModelSpec.from_dict(samples.meta["spec"])
    origin = dt.date.fromisoformat(samples.meta["time_origin"])
    model = Model(spec, samples.meta["n_rows"], len(samples.meta["regions"]), origin)
    eta = samples.flat("iota")[:, None, :] + np.zeros((1, len(rows), 1))
    if "temporal" not in model.f_terms and len(rows):
        warnings.warn("no temporal term in the mean model: forecasts hold the trend constant", stacklevel=3)
    for name, term in model.f_terms.items():
        X = model.design(term, rows) @ term.Q.T  # full-basis coordinates
        eta = eta + np.einsum("tk,nsk->nts", X, samples.flat(f"f.{name}"))
    return eta


def _nb_draw(rng, lam, theta):
    return rng.negative_binomial(theta, theta / (theta + lam))


def _gdm_forecast(samples: PosteriorSamples, data, rows: np.ndarray, rng) -> np.ndarray:
    lam = np.exp(_gdm_log_lambda(samples, rows))
    theta = samples.flat("theta")[:, None, :]
    return _nb_draw(rng, lam, np.broadcast_to(theta, lam.shape))


def _gdm_replicate(samples: PosteriorSamples, rows: np.ndarray, rng) -> np.ndarray:
    lam = samples.flat("lambda")[:, rows]
    theta = np.broadcast_to(samples.flat("theta")[:, None, :], lam.shape)
    return _nb_draw(rng, lam, theta)


FORECASTERS["gdm"] = _gdm_forecast
REPLICATORS["gdm"] = _gdm_replicate


def _load_family_hooks():
    import importlib

    importlib.import_module(".baselines", __package__)  # registers the baseline families


# ---------------------------------------------------------------------------
# posterior predictive check
# ---------------------------------------------------------------------------

STATISTICS = {
    "sample_mean": lambda a, axis=-1: np.mean(a, axis=axis),
    "sample_variance": lambda a, axis=-1: np.var(a, axis=axis, ddof=1),
}


@dataclass
class PPCResult:
    statistic: str
    observed: float
    replicates: np.ndarray
    p_upper: float
    p_two_sided: float
    rows: np.ndarray

    @property
    def inside_central_95(self) -> bool:
        lo, hi = np.quantile(self.replicates, [0.025, 0.975])
        return bool(lo <= self.observed <= hi)

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "observed": self.observed,
            "replicate_mean": float(self.replicates.mean()),
            "replicate_quantiles": dict(zip(("q025", "q500", "q975"), np.quantile(self.replicates, [0.025, 0.5, 0.975]).tolist())),
            "p_upper": self.p_upper,
            "p_two_sided": self.p_two_sided,
            "n_rows": int(len(self.rows)),
        }


def posterior_predictive_check(samples: PosteriorSamples, data: CensoredTriangle, statistic: str = "sample_variance",
                               *, rng: np.random.Generator | None = None) -> PPCResult:
    """Replicate the all-region totals of fully observed rows and locate the observed statistic.

    Rows enter when every region is fully observed at ``t0``. The tail
    probability is two-sided, ``2 * min(P(rep >= obs), P(rep <= obs))``.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {sorted(STATISTICS)}")
    full = data.fully_observed[: data.t0 + 1].all(axis=1)
    rows = np.nonzero(full)[0]
    if len(rows) < (2 if statistic == "sample_variance" else 1):
        raise ValueError(f"not enough fully observed rows for the {statistic} check")
    fn = REPLICATORS.get(samples.family)
    if fn is None:
        _load_family_hooks()
        fn = REPLICATORS.get(samples.family)
    if fn is None:
        raise ValueError(f"no replicator registered for model family {samples.family!r}")
    rng = _default_rng(samples) if rng is None else rng
    reps = fn(samples, rows, rng).sum(axis=2)
    stat = STATISTICS[statistic]
    observed = float(stat(data.observed_totals()[rows].sum(axis=1).astype(float)))
    rep_stat = stat(reps.astype(float), axis=1)
    p_hi = float(np.mean(rep_stat >= observed))
    p_lo = float(np.mean(rep_stat <= observed))
    return PPCResult(statistic, observed, rep_stat, p_hi, min(1.0, 2.0 * min(p_hi, p_lo)), rows)
