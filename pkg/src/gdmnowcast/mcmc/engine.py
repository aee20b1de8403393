"""Multi-chain MCMC for the joint model.

Each chain owns a ``numpy.random.Generator`` seeded ``master_seed + chain``;
all randomness of a sweep is drawn from it up front, so a run is a pure
function of its seed regardless of which kernel route executes the sweep.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial
from typing import Callable

import numpy as np
from scipy.special import expit, logit, ndtri

from .. import kernels
from .._compat import USE_NUMBA
from ..data import CensoredTriangle
from ..model import (
    FitData,
    Model,
    ModelSpec,
    NestedSplineTerm,
    ParameterState,
    log_posterior,
    prepare_data,
    relative_means,
)
from .adapt import OPTIMAL_SCALE, BlockCovariance, rm_gain
from .samples import PosteriorSamples
from .sweep import ACC_FIELDS, LINK_CODES, SCALE_FIELDS, SweepState, refresh, sweep

__all__ = [
    "McmcConfig",
    "ChainResult",
    "ChainBase",
    "GDMChain",
    "run_chains",
    "run_sampler",
    "sample_latent_total",
    "InitialisationError",
]


class InitialisationError(RuntimeError):
    """No finite starting point found; ``state`` holds the last attempt."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 4
    n_iterations: int = 200_000
    burn_in: int = 100_000
    thin: int = 10
    master_seed: int = 0
    target_scalar: float = 0.44
    target_block: float = 0.234
    cov_start: int = 2000
    cov_every: int = 500
    conjugate: bool = True
    latent_z: str = "sample"
    n_jobs: int = 1
    log_every: int = 1000
    log_path: str | None = None
    max_init_tries: int = 100

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError(f"burn_in ({self.burn_in}) must be below n_iterations ({self.n_iterations})")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.latent_z != "sample":
            raise ValueError("only latent_z='sample' is implemented")

    @classmethod
    def testing(cls, **kw) -> McmcConfig:
        """The reduced 20k/10k/5 budget."""
        base = dict(n_iterations=20_000, burn_in=10_000, thin=5)
        base.update(kw)
        return cls(**base)

    @property
    def n_keep(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    @property
    def cov_switch(self) -> int:
        """Iteration at which blocks move to their empirical covariance."""
        return min(self.cov_start, self.burn_in // 2)


@dataclass
class ChainResult:
    draws: dict[str, np.ndarray]
    adaptation: dict
    final_state: object = None


# ---------------------------------------------------------------------------
# generic chain driver
# ---------------------------------------------------------------------------


class _JsonLog:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def write(self, **rec):
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


class ChainBase:
    """Iteration loop shared by all samplers: adaptation window, thinning, logging."""

    def __init__(self, cfg: McmcConfig, chain_index: int):
        self.cfg = cfg
        self.chain = chain_index
        self.seed = cfg.master_seed + chain_index
        self.rng = np.random.default_rng(self.seed)

    # hooks --------------------------------------------------------------
    def step(self, it: int, gamma: float) -> None:
        raise NotImplementedError

    def record(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def scales(self) -> dict[str, list]:
        return {}

    def accept_counts(self) -> dict[str, np.ndarray]:
        return {}

    def reset_counts(self) -> None:
        pass

    def end_of_iteration(self, it: int) -> None:
        pass

    def final_state(self):
        return None

    def finish_draws(self, draws: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return draws

    # loop -----------------------------------------------------------------
    def run(self) -> ChainResult:
        cfg = self.cfg
        log = _JsonLog(cfg.log_path)
        keep = cfg.n_keep
        buffers: dict[str, np.ndarray] | None = None
        snapshots = []
        t_start = time.perf_counter()
        k = 0
        for it in range(cfg.n_iterations):
            adapting = it < cfg.burn_in
            self.step(it, rm_gain(it) if adapting else 0.0)
            if adapting:
                self.end_of_iteration(it)
            if it + 1 == cfg.burn_in:
                snapshots.append({"iter": it + 1, "phase": "burn_in_end", "scales": self.scales()})
                self.reset_counts()
            if it >= cfg.burn_in and (it + 1 - cfg.burn_in) % cfg.thin == 0 and k < keep:
                rec = self.record()
                if buffers is None:
                    buffers = {n: np.empty((keep,) + np.shape(v), dtype=np.asarray(v).dtype) for n, v in rec.items()}
                for n, v in rec.items():
                    buffers[n][k] = v
                k += 1
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                snap = {"iter": it + 1, "phase": "burn_in" if adapting else "sampling", "scales": self.scales()}
                snapshots.append(snap)
                log.write(event="progress", chain=self.chain, iter=it + 1, phase=snap["phase"],
                          elapsed=round(time.perf_counter() - t_start, 3),
                          accept=self._rates(max(1, it + 1 - (0 if adapting else cfg.burn_in))))
        n_post = cfg.n_iterations - cfg.burn_in
        rates = self._rates(n_post)
        log.write(event="done", chain=self.chain, seed=self.seed, accept=rates,
                  elapsed=round(time.perf_counter() - t_start, 3))
        log.close()
        adaptation = {"chain": self.chain, "seed": self.seed, "snapshots": snapshots,
                      "final_scales": self.scales(), "acceptance": rates}
        return ChainResult(self.finish_draws(buffers or {}), adaptation, self.final_state())

    def _rates(self, n: int) -> dict:
        return {name: (np.asarray(v) / n).tolist() for name, v in self.accept_counts().items()}


def _run_one(factory: Callable[[int], ChainBase], chain_index: int) -> ChainResult:
    return factory(chain_index).run()


def run_sampler(factory: Callable[[int], ChainBase], cfg: McmcConfig, meta: dict) -> tuple[PosteriorSamples, list]:
    """Run ``cfg.n_chains`` chains built by ``factory(chain_index)`` and merge their draws."""
    idx = list(range(cfg.n_chains))
    if cfg.n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_jobs, cfg.n_chains)) as ex:
            results = list(ex.map(partial(_run_one, factory), idx))
    else:
        results = [_run_one(factory, i) for i in idx]
    names = results[0].draws.keys()
    draws = {n: np.stack([r.draws[n] for r in results]) for n in names}
    meta = dict(meta)
    meta["config"] = asdict(cfg)
    meta["seeds"] = [cfg.master_seed + i for i in idx]
    meta["backend"] = kernels.BACKEND if USE_NUMBA else "numpy"
    samples = PosteriorSamples(draws, meta, [r.adaptation for r in results])
    return samples, [r.final_state for r in results]


# ---------------------------------------------------------------------------
# joint-model chain
# ---------------------------------------------------------------------------


def _ordered_terms(model: Model):
    """``(target, name, SmoothTerm)`` with mean-model terms first."""
    return [("f", n, t) for n, t in model.f_terms.items()] + [("g", n, t) for n, t in model.g_terms.items()]


def _empirical_fractions(model: Model, data: FitData) -> np.ndarray:
    """(S, D) cumulative proportion reported by each delay, from complete rows."""
    D = data.z.shape[2]
    S = data.z.shape[1]
    cum = np.cumsum(data.z, axis=2)
    F = np.empty((S, D))
    pooled_rows = data.full
    pooled = None
    if pooled_rows.any():
        tot = data.y_obs[pooled_rows].sum()
        if tot > 0:
            pooled = cum[pooled_rows].sum(axis=0) / tot
    for s in range(S):
        rows = data.full[:, s]
        tot = data.y_obs[rows, s].sum() if rows.any() else 0
        if tot >= 20:
            F[s] = cum[rows, s].sum(axis=0) / tot
        elif pooled is not None:
            F[s] = pooled
        else:
            F[s] = (np.arange(D) + 1.0) / D
    F = np.clip(F, 0.02, 0.98)
    for d in range(1, D):
        F[:, d] = np.maximum(F[:, d], np.minimum(F[:, d - 1] + 0.01, 0.995))
    return F


def initial_parameter_state(model: Model, data: FitData) -> ParameterState:
    """Deterministic moment-based starting point."""
    spec = model.spec
    T, S, D = data.z.shape
    nb = model.n_bb
    F = _empirical_fractions(model, data)
    state = ParameterState.zeros(model)
    if nb:
        Fb = F[:, :nb]
        if spec.link == "survivor_probit":
            state.psi = ndtri(Fb)
        else:
            prev = np.concatenate([np.zeros((S, 1)), Fb[:, :-1]], axis=1)
            state.psi = logit(np.clip((Fb - prev) / (1.0 - prev), 1e-3, 1 - 1e-3))
    nvis = data.visible.sum(axis=2)
    frac = np.take_along_axis(np.broadcast_to(F[None], (T, S, D)), np.maximum(nvis - 1, 0)[:, :, None], axis=2)[:, :, 0]
    frac = np.where(nvis > 0, frac, 1.0)
    y_hat = np.where(data.full, data.y_obs, np.ceil(data.known_sum / frac)).astype(float)
    y_hat = np.maximum(y_hat, data.known_sum)
    v = np.log(y_hat + 0.5)
    state.iota = v.mean(axis=0)
    fit = np.repeat(state.iota[None, :], T, axis=0)
    if model.f_terms:
        Xs = [t.Xr for t in model.f_terms.values()]
        X = np.hstack(Xs)
        Pen = np.zeros((X.shape[1], X.shape[1]))
        o = 0
        for t in model.f_terms.values():
            Pen[o:o + t.dim, o:o + t.dim] = t.P
            o += t.dim
        B = np.linalg.solve(X.T @ X + 1.0 * Pen + 1e-8 * np.eye(X.shape[1]), X.T @ (v - state.iota[None, :]))
        fit = fit + X @ B
        o = 0
        for name, t in model.f_terms.items():
            b = B[o:o + t.dim].T
            o += t.dim
            c = state.f_terms[name]
            c.coef_region = b @ t.Q.T
            sig = np.sqrt(np.einsum("si,ij,sj->s", b, t.P, b) / t.dim)
            c.sigma_region = np.clip(sig, 0.05, 3.0)
            if spec.nested:
                bo = b.mean(axis=0)
                c.coef_overall = bo @ t.Q.T
                c.sigma_overall = float(np.clip(math.sqrt(bo @ t.P @ bo / t.dim), 0.05, 3.0))
    for name, t in model.g_terms.items():
        c = state.g_terms[name]
        c.sigma_region = np.full(S, 0.3)
        if spec.nested:
            c.sigma_overall = 0.3
    mu = np.exp(fit)
    excess = np.mean((y_hat - mu) ** 2 - mu, axis=0)
    theta = np.where(excess > 0, np.mean(mu**2, axis=0) / np.maximum(excess, 1e-9), 200.0)
    if spec.priors.theta_fixed is not None:
        theta = np.full(S, float(spec.priors.theta_fixed))
    state.theta = np.clip(theta, 1.0, 500.0)
    state.phi = np.full((S, nb), 30.0)
    state.y = np.maximum(np.round(y_hat), data.known_sum).astype(np.int64)
    state.y = np.where(data.full, data.y_obs, state.y)
    state.z_fill = np.zeros((T, S, D), dtype=np.int64)
    ur = spec.underreporting
    if ur is not None:
        state.rho = np.full(S, ur.logit_mean)
        state.x = np.round(state.y / expit(ur.logit_mean)).astype(np.int64)
        state.x = np.maximum(state.x, state.y)
    return state


def _jitter(model: Model, base: ParameterState, rng: np.random.Generator, scale: float) -> ParameterState:
    """Over-dispersed perturbation of a starting point."""
    st = base.copy()
    S = model.n_regions
    st.iota = st.iota + rng.normal(0.0, 0.2 * scale, S)
    for terms, coefs in ((model.f_terms, st.f_terms), (model.g_terms, st.g_terms)):
        for name, t in terms.items():
            c = coefs[name]
            c.coef_region = c.coef_region + (rng.normal(0.0, 0.1 * scale, (S, t.dim)) @ t.Q.T)
            c.sigma_region = c.sigma_region * np.exp(rng.normal(0.0, 0.3 * scale, S))
            if c.coef_overall is not None:
                c.coef_overall = c.coef_overall + rng.normal(0.0, 0.05 * scale, t.dim) @ t.Q.T
                c.sigma_overall = float(c.sigma_overall * math.exp(rng.normal(0.0, 0.3 * scale)))
    if model.spec.priors.theta_fixed is None:
        st.theta = st.theta * np.exp(rng.normal(0.0, 0.3 * scale, S))
    if st.psi.shape[1]:
        st.phi = st.phi * np.exp(rng.normal(0.0, 0.3 * scale, st.phi.shape))
        if model.spec.link == "survivor_probit":
            inc = np.diff(st.psi, axis=1) * np.exp(rng.normal(0.0, 0.1 * scale, (S, st.psi.shape[1] - 1)))
            first = st.psi[:, :1] + rng.normal(0.0, 0.1 * scale, (S, 1))
            st.psi = np.concatenate([first, first + np.cumsum(inc, axis=1)], axis=1)
        else:
            st.psi = st.psi + rng.normal(0.0, 0.1 * scale, st.psi.shape)
    ur = model.spec.underreporting
    if ur is not None and ur.logit_sd > 0:
        st.rho = st.rho + rng.normal(0.0, 0.5 * ur.logit_sd * scale, S)
    return st


def transfer_state(model: Model, data: FitData, previous: ParameterState) -> ParameterState:
    """Starting point from another fit: copy every parameter whose shape still matches."""
    st = initial_parameter_state(model, data)
    for name in ("iota", "theta", "psi", "phi", "rho"):
        new, old = getattr(st, name), getattr(previous, name, None)
        if old is not None and new is not None and np.shape(old) == np.shape(new):
            setattr(st, name, np.array(old, dtype=float, copy=True))
    for mine, theirs in ((st.f_terms, previous.f_terms), (st.g_terms, previous.g_terms)):
        for name, c in mine.items():
            o = theirs.get(name)
            if o is None or o.coef_region.shape != c.coef_region.shape:
                continue
            if (o.coef_overall is None) != (c.coef_overall is None):
                continue
            mine[name] = o.copy()
    return st


def _reduced(term, coef_full: np.ndarray) -> np.ndarray:
    return coef_full @ term.Q


class GDMChain(ChainBase):
    """One chain of the joint model."""

    def __init__(self, model: Model, data: FitData, cfg: McmcConfig, chain_index: int,
                 init: ParameterState | None = None):
        super().__init__(cfg, chain_index)
        self.model = model
        self.data = data
        self.terms = _ordered_terms(model)
        base = initial_parameter_state(model, data) if init is None else init
        last = None
        for attempt in range(cfg.max_init_tries):
            cand = _jitter(model, base, self.rng, 1.0 if attempt < cfg.max_init_tries // 2 else 0.3)
            last = cand
            try:
                lp = log_posterior(model, cand, data)
            except ValueError:
                lp = -np.inf
            if np.isfinite(lp):
                break
        else:
            raise InitialisationError(
                f"chain {chain_index}: no finite log-posterior after {cfg.max_init_tries} initialisations", last
            )
        self.st = self._build(cand)
        self._init_proposals()
        self.cov = BlockCovariance(model.n_regions, self.st.beta.shape[1]) if self.terms else None
        self.missing_cells = np.argwhere(data.impute)
        ur = model.spec.underreporting
        self.ur_adapt = ur is not None and ur.logit_sd > 0
        self.ls_rho = np.full(model.n_regions, math.log(0.5))
        self.acc_rho = np.zeros(model.n_regions, dtype=np.int64)
        self._ov_noise = None

    # state conversion -----------------------------------------------------
    def _build(self, ps: ParameterState) -> SweepState:
        model, data = self.model, self.data
        spec = model.spec
        T, S, D = data.z.shape
        nb = model.n_bb
        dims = [t.dim for _, _, t in self.terms]
        nt = len(dims)
        Kmax = max(dims) if dims else 1
        Ktot = int(sum(dims))
        tstart = np.cumsum([0] + dims[:-1]).astype(np.int64) if dims else np.zeros(0, np.int64)
        X = np.zeros((T, max(Ktot, 1)))
        P = np.zeros((nt, Kmax, Kmax))
        PLiT = np.zeros((nt, Kmax, Kmax))
        beta = np.zeros((S, max(Ktot, 1)))
        beta_o = np.zeros(max(Ktot, 1))
        sig_r = np.ones((nt, S))
        sig_o = np.ones(nt)
        for j, (tgt, name, term) in enumerate(self.terms):
            o, kd = tstart[j], term.dim
            X[:, o:o + kd] = term.Xr
            P[j, :kd, :kd] = term.P
            PLiT[j, :kd, :kd] = np.linalg.inv(term.P_chol).T
            c = (ps.f_terms if tgt == "f" else ps.g_terms)[name]
            beta[:, o:o + kd] = _reduced(term, c.coef_region)
            sig_r[j] = c.sigma_region
            if spec.nested:
                beta_o[o:o + kd] = _reduced(term, c.coef_overall)
                sig_o[j] = c.sigma_overall
        z = data.z.copy()
        if ps.z_fill is not None:
            z = np.where(data.impute, ps.z_fill[:T], z)
        floor = data.known_sum + np.where(data.impute, z, 0).sum(axis=2)
        y = np.where(data.full, data.y_obs, np.maximum(ps.y[:T], floor)).astype(np.int64)
        lat = np.argwhere(data.latent)
        ur = spec.underreporting is not None
        x = np.asarray(ps.x[:T], dtype=np.int64).copy() if ur else y.copy()
        eta = ps.iota[None, :] + np.zeros((T, S))
        goff = np.zeros((T, S))
        for j, (tgt, _, _) in enumerate(self.terms):
            o, kd = tstart[j], dims[j]
            contrib = X[:, o:o + kd] @ beta[:, o:o + kd].T
            if tgt == "f":
                eta += contrib
            else:
                goff += contrib
        pri = spec.priors
        hyper = np.array([pri.theta_shape, pri.theta_rate, pri.phi_shape, pri.phi_rate, pri.sigma_scale,
                          pri.intercept_sd, pri.psi_sd, self.cfg.target_scalar, self.cfg.target_block,
                          -1.0 if pri.theta_fixed is None else float(pri.theta_fixed)])
        zi = lambda *shape: np.zeros(shape, dtype=np.int64)
        st = SweepState(
            z=z.astype(np.int64), k=data.k.astype(np.int64), y=y, x=x,
            latent_t=lat[:, 0].astype(np.int64).copy(), latent_s=lat[:, 1].astype(np.int64).copy(),
            floor=floor.astype(np.int64), logit_pi=np.asarray(ps.rho if ur else np.zeros(S), dtype=float).copy(), ur=ur,
            X=X, tstart=tstart, tdim=np.asarray(dims, dtype=np.int64), ttarget=np.array([0 if t[0] == "f" else 1 for t in self.terms], dtype=np.int64),
            P=P, PLiT=PLiT,
            iota=ps.iota.astype(float).copy(), beta=beta, beta_o=beta_o, sig_r=sig_r, sig_o=sig_o,
            psi=ps.psi.astype(float).copy().reshape(S, nb), theta=ps.theta.astype(float).copy(), phi=ps.phi.astype(float).copy().reshape(S, nb),
            eta=eta, goff=goff, nbll=np.zeros(S), dll=np.zeros((S, nb)), dnorm=np.zeros((S, nb)),
            ls_blk=np.zeros((nt, S)), blkL=np.zeros((nt, S, Kmax, Kmax)), ls_ov=np.zeros(nt),
            ls_iota=np.zeros(S), ls_psi=np.zeros((S, nb)), ls_theta=np.zeros(S), ls_phi=np.zeros((S, nb)),
            ls_sr=np.zeros((nt, S)), ls_so=np.zeros(nt), ls_sh=np.zeros(nt), ls_sc=np.zeros((nt, S)),
            acc_blk=zi(nt, S), acc_ov=zi(nt), acc_iota=zi(S), acc_psi=zi(S, nb), acc_theta=zi(S),
            acc_phi=zi(S, nb), acc_sr=zi(nt, S), acc_so=zi(nt), acc_sh=zi(nt), acc_sc=zi(nt, S),
            hyper=hyper, link=LINK_CODES[spec.link], nested=bool(spec.nested), conj=bool(self.cfg.conjugate),
        )
        refresh(st)
        return st

    def parameter_state(self) -> ParameterState:
        """Current state on the natural scale, coefficients in full basis coordinates."""
        st = self.st
        f_terms, g_terms = {}, {}
        for j, (tgt, name, term) in enumerate(self.terms):
            o, kd = st.tstart[j], st.tdim[j]
            c = NestedSplineTerm(
                st.beta_o[o:o + kd] @ term.Q.T if st.nested else None,
                st.beta[:, o:o + kd] @ term.Q.T,
                float(st.sig_o[j]) if st.nested else None,
                st.sig_r[j].copy(),
            )
            (f_terms if tgt == "f" else g_terms)[name] = c
        z_fill = np.where(self.data.impute, st.z, 0)
        return ParameterState(
            st.iota.copy(), f_terms, g_terms, st.psi.copy(), st.theta.copy(), st.phi.copy(), st.y.copy(),
            z_fill, st.x.copy() if st.ur else None, st.logit_pi.copy() if st.ur else None,
        )

    # proposals --------------------------------------------------------------
    def _row_delay_ll(self, goff: np.ndarray) -> np.ndarray:
        st = self.st
        T, S = st.y.shape
        nb = st.psi.shape[1]
        if nb == 0:
            return np.zeros((T, S))
        R = T * S
        rep = lambda a: np.broadcast_to(a[None], (T,) + a.shape).reshape(R, nb)
        ll, _ = kernels.delay_loglik_np(st.z.reshape(1, R, -1), st.y.reshape(1, R), st.k.reshape(1, R),
                                        goff.reshape(1, R), rep(st.psi), rep(st.phi), st.link, 0, False)
        return ll.sum(axis=1).reshape(T, S)

    def _init_proposals(self):
        st = self.st
        T, S = st.y.shape
        lam = np.exp(st.eta)
        w_f = lam * st.theta[None, :] / (lam + st.theta[None, :])
        h = 1e-3
        if any(t[0] == "g" for t in self.terms):
            l0 = self._row_delay_ll(st.goff)
            w_g = -(self._row_delay_ll(st.goff + h) - 2 * l0 + self._row_delay_ll(st.goff - h)) / h**2
            w_g = np.maximum(w_g, 1e-6)
        for j, (tgt, _, term) in enumerate(self.terms):
            o, kd = st.tstart[j], st.tdim[j]
            Xj = st.X[:, o:o + kd]
            w = w_f if tgt == "f" else w_g
            for s in range(S):
                H = Xj.T @ (w[:, s:s + 1] * Xj) + term.P / st.sig_r[j, s] ** 2
                try:
                    cov = np.linalg.inv(H)
                    st.blkL[j, s, :kd, :kd] = np.linalg.cholesky(0.5 * (cov + cov.T) * OPTIMAL_SCALE**2 / kd)
                except np.linalg.LinAlgError:
                    st.blkL[j, s, :kd, :kd] = np.eye(kd) * 0.05
            st.ls_ov[j] = math.log(OPTIMAL_SCALE / math.sqrt(kd))
            st.ls_sh[j] = -0.5 * math.log(S)
        st.ls_iota[:] = np.log(2.4 / np.sqrt(np.maximum(w_f.sum(axis=0), 1e-6)))
        st.ls_theta[:] = math.log(0.3)
        st.ls_phi[:] = math.log(0.3)
        st.ls_psi[:] = math.log(0.1)
        st.ls_sr[:] = math.log(0.5)
        st.ls_so[:] = math.log(0.5)
        st.ls_sc[:] = math.log(0.3)

    # driver hooks ---------------------------------------------------------
    def step(self, it: int, gamma: float) -> None:
        st = self.st
        lay = st.layout
        normals = self.rng.standard_normal(lay.n_normals)
        uniforms = 1.0 - self.rng.random(lay.n_uniforms)
        sweep(st, normals, uniforms, gamma)
        extra = False
        if len(self.missing_cells):
            self._impute_missing()
            extra = True
        if st.ur:
            self._underreporting_step(gamma)
            extra = True
        if extra:
            refresh(st)

    def end_of_iteration(self, it: int) -> None:
        if self.cov is None:
            return
        switch = self.cfg.cov_switch
        if it + 1 >= switch // 2 and it % 5 == 0:
            self.cov.add(self.st.beta)
        due = it + 1 == switch or (it + 1 > switch and (it + 1 - switch) % self.cfg.cov_every == 0)
        if due and self.cov.n >= 20:
            st = self.st
            for j in range(len(self.terms)):
                o, kd = int(st.tstart[j]), int(st.tdim[j])
                st.blkL[j, :, :kd, :kd] = self.cov.proposal_chol(slice(o, o + kd), st.blkL[j, :, :kd, :kd])
                if it + 1 == switch:
                    st.ls_blk[j] = 0.0

    def scales(self) -> dict:
        d = {name: np.asarray(getattr(self.st, name)).tolist() for name in SCALE_FIELDS}
        if self.st.ur:
            d["ls_rho"] = self.ls_rho.tolist()
        return d

    def accept_counts(self) -> dict:
        d = {name.replace("acc_", ""): getattr(self.st, name) for name in ACC_FIELDS}
        if self.st.ur:
            d["rho"] = self.acc_rho
        return d

    def reset_counts(self) -> None:
        for name in ACC_FIELDS:
            getattr(self.st, name)[...] = 0
        self.acc_rho[:] = 0

    def record(self) -> dict:
        st = self.st
        out = {
            "lambda": np.exp(st.eta),
            "y": st.y.copy(),
            "theta": st.theta.copy(),
            "iota": st.iota.copy(),
            "psi": st.psi.copy(),
            "phi": st.phi.copy(),
            "_beta": st.beta.copy(),
            "_beta_o": st.beta_o.copy(),
            "_sig_r": st.sig_r.copy(),
            "_sig_o": st.sig_o.copy(),
        }
        if st.ur:
            out["x"] = st.x.copy()
            out["rho"] = st.logit_pi.copy()
        if len(self.missing_cells):
            c = self.missing_cells
            out["z_missing"] = st.z[c[:, 0], c[:, 1], c[:, 2]].copy()
        return out

    def finish_draws(self, draws: dict) -> dict:
        beta = draws.pop("_beta")
        beta_o = draws.pop("_beta_o")
        sig_r = draws.pop("_sig_r")
        sig_o = draws.pop("_sig_o")
        st = self.st
        for j, (tgt, name, term) in enumerate(self.terms):
            o, kd = int(st.tstart[j]), int(st.tdim[j])
            draws[f"{tgt}.{name}"] = beta[:, :, o:o + kd] @ term.Q.T
            draws[f"sigma.{tgt}.{name}"] = sig_r[:, j]
            if st.nested:
                draws[f"{tgt}.{name}.overall"] = beta_o[:, o:o + kd] @ term.Q.T
                draws[f"sigma.{tgt}.{name}.overall"] = sig_o[:, j]
        return draws

    def final_state(self):
        return self.parameter_state()

    # optional layers ------------------------------------------------------------
    def _impute_missing(self) -> None:
        """Gibbs update of lost cells from their discrete full conditional."""
        st = self.st
        for t, s, d in self.missing_cells:
            kk = int(st.k[t, s])
            row = st.z[t, s].astype(np.int64)
            other = int(st.floor[t, s]) - int(row[d])
            cand = np.arange(0, int(st.y[t, s]) - other + 1)
            zmat = np.repeat(row[None, :kk], len(cand), axis=0)
            zmat[:, d] = cand
            nu, onu = relative_means(st.psi[s][None, :kk] + st.goff[t, s], self.model.spec.link)
            n = st.y[t, s] - (np.cumsum(zmat, axis=1) - zmat)
            ph = st.phi[s, :kk][None, :]
            a, b = nu * ph, onu * ph
            from scipy.special import gammaln

            lw = (gammaln(n + 1.0) - gammaln(zmat + 1.0) - gammaln(n - zmat + 1.0) + gammaln(zmat + a)
                  + gammaln(n - zmat + b) - gammaln(n + ph) - gammaln(a) - gammaln(b) + gammaln(ph)).sum(axis=1)
            w = np.exp(lw - lw.max())
            pick = int(np.searchsorted(np.cumsum(w), self.rng.random() * w.sum(), side="right"))
            pick = min(pick, len(cand) - 1)
            st.z[t, s, d] = cand[pick]
            st.floor[t, s] = other + cand[pick]

    def _underreporting_step(self, gamma: float) -> None:
        st = self.st
        ur = self.model.spec.underreporting
        lam = np.exp(st.eta)
        th = st.theta[None, :]
        q = lam / (lam + th)
        pi = expit(st.logit_pi)[None, :]
        p = 1.0 - q * (1.0 - pi)
        st.x[...] = st.y + self.rng.negative_binomial(st.y + th, np.clip(p, 1e-300, 1.0))
        if self.ur_adapt:
            S = st.logit_pi.shape[0]
            cur = st.logit_pi.copy()
            prop = cur + np.exp(self.ls_rho) * self.rng.standard_normal(S)
            y, x = st.y, st.x

            def ll(r):
                return (y * -np.logaddexp(0.0, -r)[None, :] + (x - y) * -np.logaddexp(0.0, r)[None, :]).sum(axis=0) \
                    - 0.5 * ((r - ur.logit_mean) / ur.logit_sd) ** 2

            dtot = ll(prop) - ll(cur)
            ok = np.log(1.0 - self.rng.random(S)) < dtot
            st.logit_pi[ok] = prop[ok]
            self.acc_rho += ok
            if gamma > 0:
                self.ls_rho += gamma * (np.exp(np.minimum(dtot, 0.0)) - self.cfg.target_scalar)


def _gdm_factory(model: Model, data: FitData, cfg: McmcConfig, init, chain_index: int) -> GDMChain:
    start = init[chain_index % len(init)] if isinstance(init, (list, tuple)) else init
    return GDMChain(model, data, cfg, chain_index, start)


def run_chains(spec: ModelSpec, data: CensoredTriangle, cfg: McmcConfig,
               init: ParameterState | list | None = None, return_states: bool = False):
    """Fit the joint model to the rows ``0..t0`` of ``data``.

    ``init`` gives warm-start states (e.g. the final states of a previous
    fit); parameters whose shapes no longer match are re-initialised.
    """
    model = Model.for_data(spec, data)
    fd = prepare_data(model, data)
    if init is not None:
        inits = init if isinstance(init, (list, tuple)) else [init]
        init = [transfer_state(model, fd, s) for s in inits]
    factory = partial(_gdm_factory, model, fd, cfg, init)
    meta = {
        "family": "gdm",
        "spec": spec.to_dict(),
        "t0": int(data.t0),
        "time_origin": data.time_origin.isoformat(),
        "regions": list(data.regions),
        "n_rows": int(data.n_rows),
        "d_max": int(data.d_max),
        "term_order": [f"{tgt}.{name}" for tgt, name, _ in _ordered_terms(model)],
        "missing_cells": np.argwhere(fd.impute).tolist(),
    }
    samples, states = run_sampler(factory, cfg, meta)
    return (samples, states) if return_states else samples


def sample_latent_total(model: Model, state: ParameterState, data: CensoredTriangle | FitData, t: int, s: int,
                        rng: np.random.Generator) -> int:
    """Exact draw of one row's total from its discrete full conditional."""
    fd = data if isinstance(data, FitData) else prepare_data(model, data)
    z = fd.z[t, s].copy()
    if state.z_fill is not None:
        z = np.where(fd.impute[t, s], state.z_fill[t, s], z)
    floor = int(fd.known_sum[t, s] + np.where(fd.impute[t, s], z, 0).sum())
    if fd.full[t, s]:
        return int(fd.y_obs[t, s])
    nb = model.n_bb
    kk = int(fd.k[t, s])
    g = sum(term.basis.X[t] @ state.g_terms[n].coef_region[s] for n, term in model.g_terms.items())
    eta = state.iota[s] + sum(term.basis.X[t] @ state.f_terms[n].coef_region[s] for n, term in model.f_terms.items())
    _, onu = relative_means(state.psi[s][None, :] + g, model.spec.link) if nb else (None, np.ones((1, 0)))
    onu_row = np.ones(max(nb, 1))
    onu_row[:nb] = onu[0]
    lo = np.log(onu_row[:kk]).sum()
    mrem = math.exp(eta + lo)
    th = float(state.theta[s])
    cap0 = floor + int(mrem + 6.0 * math.sqrt(mrem + mrem * mrem / th)) + 2
    ur = model.spec.underreporting is not None
    zr = np.zeros((1, max(nb, 1)), dtype=np.int64)
    zr[0, :nb] = z[:nb]
    phi = np.ones((1, max(nb, 1)))
    phi[0, :nb] = state.phi[s]
    out = kernels.sample_latent_rows(
        np.array([floor], dtype=np.int64), np.array([float(eta)]), np.array([th]), np.array([kk], dtype=np.int64),
        zr, onu_row[None, :], onu_row[None, :], phi,
        np.array([int(state.x[t, s]) if ur else -1], dtype=np.int64),
        np.array([float(state.rho[s]) if ur else 0.0]), np.array([cap0], dtype=np.int64),
        np.array([1.0 - rng.random()]),
    )
    return int(out[0])
