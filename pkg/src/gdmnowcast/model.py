"""Joint model for totals and delayed partial counts.

Totals follow a Negative-Binomial with ``log(lam[t, s]) = f(t, s)``; the
delayed counts of a row follow a Generalized-Dirichlet-Multinomial whose
relative means come from ``g(t, s, d)`` through a probit link on the
cumulative proportion reported (survivor variant) or a logit link on the
relative means themselves (hazard variant).

``f`` is an intercept per region plus registered smooth terms; ``g`` is a
monotone delay curve ``psi[s, d]`` plus registered smooth terms. Smooth terms
are nested: regional coefficients are centred on overall coefficients.

Only the first ``n_bb = min(d_prime, d_max - 1)`` Beta-Binomial conditionals
are modelled explicitly; later delays enter only through the total.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.special import expit, gammaln, log_ndtr, ndtr

from . import kernels
from .data import CensoredTriangle
from .splines import BasisWithPenalty, cubic_basis, cyclic_basis, evaluate_basis

__all__ = [
    "TermSpec",
    "PriorSpec",
    "UnderreportingSpec",
    "ModelSpec",
    "NestedSplineTerm",
    "ParameterState",
    "Model",
    "FitData",
    "prepare_data",
    "relative_means",
    "survivor_curve",
    "survivor_to_relative_means",
    "eval_f",
    "eval_survivor_curve",
    "hazard_relative_means",
    "log_likelihood",
    "log_prior",
    "log_posterior",
    "apply_underreporting",
]

SCHEMA_VERSION = 1
LINKS = ("survivor_probit", "hazard_logit")
F_KINDS = ("temporal", "seasonal")
G_KINDS = ("temporal", "weekly")
_DEFAULT_K = {"temporal": 10, "weekly": 7, "seasonal": 8}
_DEFAULT_PERIOD = {"weekly": 7.0, "seasonal": 365.25}
# logit-scale prior sd above which the under-reporting prior counts as flat
FLAT_LOGIT_SD = 10.0
_NU_EPS = 1e-12


@dataclass(frozen=True)
class TermSpec:
    kind: str
    n_basis: int | None = None
    period: float | None = None

    @property
    def K(self) -> int:
        return self.n_basis if self.n_basis is not None else _DEFAULT_K[self.kind]

    @property
    def cycle(self) -> float | None:
        if self.kind == "temporal":
            return None
        return self.period if self.period is not None else _DEFAULT_PERIOD[self.kind]


@dataclass(frozen=True)
class PriorSpec:
    theta_shape: float = 2.0
    theta_rate: float = 0.02
    phi_shape: float = 2.0
    phi_rate: float = 0.02
    sigma_scale: float = 1.0
    intercept_sd: float = 10.0
    psi_sd: float = 10.0
    penalty_ridge: float = 1e-6
    theta_fixed: float | None = None


@dataclass(frozen=True)
class UnderreportingSpec:
    """``logit(pi[t, s]) = rho[s]`` with ``rho[s] ~ Normal(logit_mean, logit_sd**2)``.

    ``logit_sd = 0`` fixes the reporting probability.
    """

    logit_mean: float
    logit_sd: float | None

    def __post_init__(self):
        sd = self.logit_sd
        if sd is None or not np.isfinite(sd) or sd > FLAT_LOGIT_SD:
            raise ValueError(
                "under-reporting needs an informative prior on the reporting probability: "
                "with a flat prior the mean and the reporting probability are not identifiable"
            )
        if sd < 0:
            raise ValueError("logit_sd must be non-negative")


@dataclass(frozen=True)
class ModelSpec:
    d_max: int
    d_prime: int | None = None
    link: str = "survivor_probit"
    f_terms: tuple[TermSpec, ...] = (TermSpec("temporal"),)
    g_terms: tuple[TermSpec, ...] = (TermSpec("temporal"), TermSpec("weekly"))
    nested: bool = True
    priors: PriorSpec = field(default_factory=PriorSpec)
    underreporting: UnderreportingSpec | None = None

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.d_prime is None:
            object.__setattr__(self, "d_prime", min(6, self.d_max))
        if not 1 <= self.d_prime <= self.d_max:
            raise ValueError(f"d_prime must lie in [1, {self.d_max}], got {self.d_prime}")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        object.__setattr__(self, "f_terms", tuple(self.f_terms))
        object.__setattr__(self, "g_terms", tuple(self.g_terms))
        for name, terms, allowed in (("f", self.f_terms, F_KINDS), ("g", self.g_terms, G_KINDS)):
            kinds = [t.kind for t in terms]
            if len(set(kinds)) != len(kinds):
                raise ValueError(f"duplicate {name} terms: {kinds}")
            for k in kinds:
                if k not in allowed:
                    raise ValueError(f"{name} terms must be among {allowed}, got {k!r}")

    @property
    def n_bb(self) -> int:
        """Number of explicitly modelled Beta-Binomial conditionals."""
        return min(self.d_prime, self.d_max - 1)

    # serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported model spec schema_version {version}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model spec field(s): {sorted(unknown)}")
        if "d_max" not in d:
            raise ValueError("model spec field 'd_max' is required")
        if "f_terms" in d:
            d["f_terms"] = tuple(TermSpec(**t) for t in d["f_terms"])
        if "g_terms" in d:
            d["g_terms"] = tuple(TermSpec(**t) for t in d["g_terms"])
        if "priors" in d:
            d["priors"] = PriorSpec(**d["priors"])
        if d.get("underreporting") is not None:
            d["underreporting"] = UnderreportingSpec(**d["underreporting"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# compiled model: bases and reduced coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothTerm:
    """A registered smooth in coordinates orthogonal to the constant direction.

    Column centring makes ``X @ ones == 0``; the constant direction is also an
    eigenvector of ``M + ridge*I``, so dropping it marginalises it out exactly.
    ``Q`` maps reduced coefficients ``beta`` to full ones ``kappa = Q @ beta``.
    """

    name: str
    spec: TermSpec
    basis: BasisWithPenalty
    Q: np.ndarray
    Xr: np.ndarray
    P: np.ndarray
    P_chol: np.ndarray
    logdet_P: float

    @property
    def dim(self) -> int:
        return self.Q.shape[1]


def _make_term(name: str, spec: TermSpec, points: np.ndarray, ridge: float) -> SmoothTerm:
    if spec.kind == "temporal":
        basis = cubic_basis(points, spec.K)
    else:
        kind = "weekly_cyclic" if spec.kind == "weekly" else "seasonal_cyclic"
        basis = cyclic_basis(points, spec.cycle, spec.K, kind=kind)
    Q = null_space(np.ones((1, basis.K)))
    P = Q.T @ (basis.M + ridge * np.eye(basis.K)) @ Q
    P = 0.5 * (P + P.T)
    L = np.linalg.cholesky(P)
    return SmoothTerm(name, spec, basis, Q, basis.X @ Q, P, L, 2.0 * float(np.log(np.diag(L)).sum()))


def _term_points(spec: TermSpec, rows: np.ndarray, time_origin: dt.date) -> np.ndarray:
    if spec.kind == "weekly":
        # calendar-aligned so the phase carries over to forecast dates
        return (time_origin.toordinal() + rows).astype(float)
    return rows.astype(float)


class Model:
    """A :class:`ModelSpec` bound to a data grid (rows ``0..n_rows-1``, regions)."""

    def __init__(self, spec: ModelSpec, n_rows: int, n_regions: int, time_origin: dt.date):
        self.spec = spec
        self.n_rows = int(n_rows)
        self.n_regions = int(n_regions)
        self.time_origin = time_origin
        rows = np.arange(self.n_rows)
        ridge = spec.priors.penalty_ridge
        self.f_terms = {t.kind: _make_term(t.kind, t, _term_points(t, rows, time_origin), ridge) for t in spec.f_terms}
        self.g_terms = {t.kind: _make_term(t.kind, t, _term_points(t, rows, time_origin), ridge) for t in spec.g_terms}

    @classmethod
    def for_data(cls, spec: ModelSpec, ct: CensoredTriangle) -> Model:
        if ct.d_max != spec.d_max:
            raise ValueError(f"spec d_max={spec.d_max} but data has d_max={ct.d_max}")
        return cls(spec, ct.n_rows, ct.n_regions, ct.time_origin)

    @property
    def n_bb(self) -> int:
        return self.spec.n_bb

    def design(self, term: SmoothTerm, rows) -> np.ndarray:
        """Reduced design matrix of ``term`` at arbitrary (possibly future) rows."""
        rows = np.asarray(rows)
        pts = _term_points(term.spec, rows, self.time_origin)
        return evaluate_basis(term.basis, pts) @ term.Q


# ---------------------------------------------------------------------------
# parameter state
# ---------------------------------------------------------------------------


@dataclass
class NestedSplineTerm:
    coef_overall: np.ndarray | None
    coef_region: np.ndarray
    sigma_overall: float | None
    sigma_region: np.ndarray

    def copy(self) -> NestedSplineTerm:
        return NestedSplineTerm(
            None if self.coef_overall is None else self.coef_overall.copy(),
            self.coef_region.copy(),
            self.sigma_overall,
            self.sigma_region.copy(),
        )


@dataclass
class ParameterState:
    """Natural-scale parameters; spline coefficients in full basis coordinates."""

    iota: np.ndarray
    f_terms: dict[str, NestedSplineTerm]
    g_terms: dict[str, NestedSplineTerm]
    psi: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    y: np.ndarray
    z_fill: np.ndarray | None = None
    x: np.ndarray | None = None
    rho: np.ndarray | None = None

    def copy(self) -> ParameterState:
        cp = lambda a: None if a is None else np.array(a, copy=True)
        return ParameterState(
            self.iota.copy(),
            {k: v.copy() for k, v in self.f_terms.items()},
            {k: v.copy() for k, v in self.g_terms.items()},
            self.psi.copy(), self.theta.copy(), self.phi.copy(), self.y.copy(),
            cp(self.z_fill), cp(self.x), cp(self.rho),
        )

    @classmethod
    def zeros(cls, model: Model) -> ParameterState:
        S, T, nb = model.n_regions, model.n_rows, model.n_bb
        nested = model.spec.nested

        def term(t: SmoothTerm) -> NestedSplineTerm:
            K = t.basis.K
            return NestedSplineTerm(np.zeros(K) if nested else None, np.zeros((S, K)),
                                    1.0 if nested else None, np.ones(S))

        ur = model.spec.underreporting
        return cls(
            iota=np.zeros(S),
            f_terms={k: term(t) for k, t in model.f_terms.items()},
            g_terms={k: term(t) for k, t in model.g_terms.items()},
            psi=np.cumsum(np.ones((S, nb)), axis=1) - 1.0,
            theta=np.full(S, 50.0),
            phi=np.full((S, nb), 50.0),
            y=np.zeros((T, S), dtype=np.int64),
            z_fill=np.zeros((T, S, model.spec.d_max), dtype=np.int64),
            x=None if ur is None else np.zeros((T, S), dtype=np.int64),
            rho=None if ur is None else np.full(S, ur.logit_mean),
        )


# ---------------------------------------------------------------------------
# linear predictors and the delay transform
# ---------------------------------------------------------------------------


def _smooth_sum(terms: dict[str, SmoothTerm], coefs: dict[str, NestedSplineTerm], T: int, S: int) -> np.ndarray:
    out = np.zeros((T, S))
    for name, term in terms.items():
        out += term.basis.X @ coefs[name].coef_region.T
    return out


def log_lambda(model: Model, state: ParameterState) -> np.ndarray:
    """(T, S) values of ``f``."""
    _check_dims(model, state)
    return state.iota[None, :] + _smooth_sum(model.f_terms, state.f_terms, model.n_rows, model.n_regions)


def g_offset(model: Model, state: ParameterState) -> np.ndarray:
    """(T, S) delay-independent part of ``g``."""
    return _smooth_sum(model.g_terms, state.g_terms, model.n_rows, model.n_regions)


def eval_f(model: Model, state: ParameterState, t: int, s: int) -> float:
    return float(log_lambda(model, state)[t, s])


def survivor_curve(psi_row, offset: float) -> np.ndarray:
    return ndtr(np.asarray(psi_row, dtype=float) + offset)


def survivor_to_relative_means(S) -> np.ndarray:
    """Relative means ``nu[d] = (S[d] - S[d-1]) / (1 - S[d-1])`` with ``S[-1] = 0``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 1:
        raise ValueError("S must be a vector")
    if np.any((S <= 0) | (S >= 1)) or np.any(np.diff(S) <= 0):
        raise ValueError("S must be strictly increasing inside (0, 1)")
    prev = np.concatenate(([0.0], S[:-1]))
    return (S - prev) / (1.0 - prev)


def relative_means_to_survivor(nu) -> np.ndarray:
    """Inverse stick-breaking: ``1 - S[d] = prod_{j<=d} (1 - nu[j])``."""
    nu = np.asarray(nu, dtype=float)
    return 1.0 - np.cumprod(1.0 - nu, axis=-1)


def relative_means(lin: np.ndarray, link: str) -> tuple[np.ndarray, np.ndarray]:
    """``(nu, 1 - nu)`` from the linear predictor ``g`` over the last axis (delays).

    The survivor branch works with ``log(1 - S)`` so that ``1 - nu`` keeps full
    precision when reporting is nearly complete.
    """
    if link == "survivor_probit":
        log_q = log_ndtr(-lin)
        prev = np.concatenate([np.zeros(lin.shape[:-1] + (1,)), log_q[..., :-1]], axis=-1)
        onu = np.exp(log_q - prev)
        nu = -np.expm1(log_q - prev)
    elif link == "hazard_logit":
        nu = expit(lin)
        onu = expit(-lin)
    else:
        raise ValueError(f"unknown link {link!r}")
    return np.clip(nu, _NU_EPS, 1.0), np.clip(onu, _NU_EPS, 1.0)


def delay_linear(model: Model, state: ParameterState) -> np.ndarray:
    """(T, S, n_bb) linear predictor ``g``."""
    return state.psi[None, :, :] + g_offset(model, state)[:, :, None]


def eval_survivor_curve(model: Model, state: ParameterState, t: int, s: int) -> np.ndarray:
    if model.spec.link != "survivor_probit":
        raise ValueError("survivor curve requested for a hazard-variant model")
    return survivor_curve(state.psi[s], float(g_offset(model, state)[t, s]))


def hazard_relative_means(model: Model, state: ParameterState, t: int, s: int) -> np.ndarray:
    if model.spec.link != "hazard_logit":
        raise ValueError("hazard relative means requested for a survivor-variant model")
    return expit(state.psi[s] + g_offset(model, state)[t, s])


def apply_underreporting(model: Model, state: ParameterState, t: int, s: int) -> tuple[float, float]:
    """``(log lam, logit pi)`` of the thinning layer at ``(t, s)``."""
    if model.spec.underreporting is None:
        raise ValueError("under-reporting layer is not enabled in this model")
    return eval_f(model, state, t, s), float(state.rho[s])


# ---------------------------------------------------------------------------
# data view used by likelihood and sampler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitData:
    """Everything the likelihood needs from a censored triangle, rows ``0..t0`` only."""

    z: np.ndarray          # (T, S, D) visible counts, 0 where hidden or lost
    visible: np.ndarray    # (T, S, D)
    k: np.ndarray          # (T, S) Beta-Binomial terms per row
    impute: np.ndarray     # (T, S, D) lost cells within the first k delays
    full: np.ndarray       # (T, S) total known
    y_obs: np.ndarray      # (T, S) known totals, -1 elsewhere
    known_sum: np.ndarray  # (T, S) sum of visible counts

    @property
    def latent(self) -> np.ndarray:
        return ~self.full


def prepare_data(model: Model, ct: CensoredTriangle) -> FitData:
    T = ct.n_rows
    z = ct.visible_z()[:T]
    vis = ct.visible[:T]
    nvis = ct.n_visible_delays()[:T]
    k = np.minimum(nvis, model.n_bb).astype(np.int64)
    d = np.arange(ct.d_max)[None, None, :]
    impute = ct.missing[:T] & (d < k[:, :, None])
    full = ct.fully_observed[:T]
    known = z.sum(axis=2)
    return FitData(z, vis, k, impute, full, np.where(full, known, -1), known)


def _check_dims(model: Model, state: ParameterState):
    S = model.n_regions
    if state.iota.shape != (S,):
        raise ValueError(f"iota has shape {state.iota.shape}, expected ({S},)")
    for terms, coefs in ((model.f_terms, state.f_terms), (model.g_terms, state.g_terms)):
        if set(terms) != set(coefs):
            raise ValueError(f"state terms {sorted(coefs)} do not match model terms {sorted(terms)}")
        for name, term in terms.items():
            if coefs[name].coef_region.shape != (S, term.basis.K):
                raise ValueError(f"term {name!r} coefficients have shape {coefs[name].coef_region.shape}")
    if state.psi.shape != (S, model.n_bb) or state.phi.shape != (S, model.n_bb):
        raise ValueError("psi/phi must have shape (S, n_bb)")


def _cells(model: Model, state: ParameterState, data: FitData) -> np.ndarray:
    z = data.z.copy()
    if state.z_fill is not None:
        z = np.where(data.impute, state.z_fill[: data.z.shape[0]], z)
    return z


def log_likelihood(model: Model, state: ParameterState, ct: CensoredTriangle | FitData) -> float:
    data = ct if isinstance(ct, FitData) else prepare_data(model, ct)
    _check_dims(model, state)
    T, S = data.full.shape
    z = _cells(model, state, data)
    y = np.asarray(state.y[:T], dtype=np.int64)
    y = np.where(data.full, data.y_obs, y)
    floor = data.known_sum + np.where(data.impute, z, 0).sum(axis=2)
    if np.any(y < floor):
        t, s = np.argwhere(y < floor)[0]
        raise ValueError(f"latent total {y[t, s]} at row ({t}, {s}) is below the reported partial sum {floor[t, s]}")
    eta = log_lambda(model, state)
    ur = model.spec.underreporting
    if ur is None:
        count = y
    else:
        count = np.asarray(state.x[:T], dtype=np.int64)
        if np.any(count < y):
            raise ValueError("true counts x must be at least the reported totals")
    ones = np.ones((T, S, 1), dtype=bool)
    total = float(kernels.nb_loglik_rows_np(count[:, :, None], ones, eta[:, :, None], state.theta).sum())
    if ur is not None:
        logit_pi = np.broadcast_to(state.rho[None, :], (T, S))
        total += float(np.sum(
            gammaln(count + 1.0) - gammaln(y + 1.0) - gammaln(count - y + 1.0)
            + y * (-np.logaddexp(0.0, -logit_pi)) + (count - y) * (-np.logaddexp(0.0, logit_pi))
        ))
    nb = model.n_bb
    if nb > 0:
        nu, onu = relative_means(delay_linear(model, state), model.spec.link)
        total += float(kernels.betabin_loglik_sums_np(z, y, data.k, nu, onu, state.phi, 0, True).sum())
    return total


def _gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * np.log(np.where(x > 0, x, 1.0)) - rate * x
    return np.where(x > 0, out, -np.inf)


def _halfnormal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    out = math.log(2.0) - 0.5 * math.log(2 * math.pi) - math.log(scale) - 0.5 * (x / scale) ** 2
    return np.where(x > 0, out, -np.inf)


def _normal_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def mvn_penalty_logpdf(beta: np.ndarray, mean: np.ndarray, sigma, term: SmoothTerm) -> np.ndarray:
    """log MVN(beta; mean, sigma^2 P^-1) in reduced coordinates; broadcasts over leading axes."""
    r = np.atleast_2d(beta - mean)
    q = np.einsum("...i,ij,...j->...", r, term.P, r)
    sigma = np.asarray(sigma, dtype=float)
    K = term.dim
    out = -0.5 * K * math.log(2 * math.pi) - K * np.log(sigma) + 0.5 * term.logdet_P - 0.5 * q / sigma**2
    return out


def psi_logprior(psi: np.ndarray, sd: float, link: str) -> np.ndarray:
    """Per-region log prior of the delay curve (random walk, truncated to increase for the survivor link)."""
    psi = np.atleast_2d(psi)
    if psi.shape[1] == 0:
        return np.zeros(psi.shape[0])
    lp = _normal_logpdf(psi[:, 0], 0.0, sd)
    if psi.shape[1] > 1:
        inc = np.diff(psi, axis=1)
        steps = _normal_logpdf(inc, 0.0, sd)
        if link == "survivor_probit":
            steps = np.where(inc > 0, steps + math.log(2.0), -np.inf)
        lp = lp + steps.sum(axis=1)
    return lp


def _spline_logprior(terms: dict[str, SmoothTerm], coefs: dict[str, NestedSplineTerm], pri: PriorSpec, nested: bool) -> float:
    total = 0.0
    for name, term in terms.items():
        c = coefs[name]
        beta_r = c.coef_region @ term.Q
        sig_r = np.asarray(c.sigma_region, dtype=float)
        total += float(_halfnormal_logpdf(sig_r, pri.sigma_scale).sum())
        if nested:
            beta_o = c.coef_overall @ term.Q
            total += float(_halfnormal_logpdf(c.sigma_overall, pri.sigma_scale))
            total += float(mvn_penalty_logpdf(beta_o, 0.0, c.sigma_overall, term).sum())
            total += float(mvn_penalty_logpdf(beta_r, beta_o, sig_r, term).sum())
        else:
            total += float(mvn_penalty_logpdf(beta_r, 0.0, sig_r, term).sum())
    return total


def log_prior(model: Model, state: ParameterState) -> float:
    _check_dims(model, state)
    pri = model.spec.priors
    total = float(_gamma_logpdf(state.theta, pri.theta_shape, pri.theta_rate).sum())
    total += float(_gamma_logpdf(state.phi, pri.phi_shape, pri.phi_rate).sum())
    total += float(_normal_logpdf(state.iota, 0.0, pri.intercept_sd).sum())
    total += float(psi_logprior(state.psi, pri.psi_sd, model.spec.link).sum())
    total += _spline_logprior(model.f_terms, state.f_terms, pri, model.spec.nested)
    total += _spline_logprior(model.g_terms, state.g_terms, pri, model.spec.nested)
    ur = model.spec.underreporting
    if ur is not None and ur.logit_sd > 0:
        total += float(_normal_logpdf(state.rho, ur.logit_mean, ur.logit_sd).sum())
    return total


def log_posterior(model: Model, state: ParameterState, ct: CensoredTriangle | FitData) -> float:
    lp = log_prior(model, state)
    if not np.isfinite(lp):
        return -np.inf
    return lp + log_likelihood(model, state, ct)
