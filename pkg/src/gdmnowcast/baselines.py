"""Competing nowcasting models, fit with the same chain driver as the joint model.

All three families model individual delay cells as Negative-Binomial and
predict a row total by adding the visible cells to posterior predictive draws
of the hidden ones. Regions are independent; every update below is
vectorised over regions but accepts or rejects each region separately.

``marginal_nb``
    Cell means ``lambda[t, s] * mu[t, s, d]`` with ``lambda`` and the delay
    curve built exactly as in the joint model; the cells past the modelled
    delays are merged into one remainder cell.
``rw_direct``
    ``log mean[t, s, d] = iota + delta[t] + beta[d] + gamma[t, d] + xi[t]``
    with first-order random walks and a cyclic weekly smooth.
``window_nb``
    ``log mean[t, s, d] = alpha[t] + log beta[d]`` with a random-walk
    ``alpha``, a time-constant simplex ``beta`` and an optional moving window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

from . import kernels
from .data import CensoredTriangle
from .mcmc.adapt import OPTIMAL_SCALE, BlockCovariance
from .mcmc.engine import ChainBase, McmcConfig, initial_parameter_state, run_sampler
from .mcmc.samples import PosteriorSamples
from .mcmc.sweep import LINK_CODES
from .model import Model, ModelSpec, TermSpec, prepare_data, psi_logprior, relative_means

__all__ = [
    "FAMILIES",
    "CLI_NAMES",
    "BaselineSpec",
    "rw1_logpdf",
    "fit_baseline",
    "fit_marginal_nb",
    "fit_rw_direct",
    "fit_window_nb",
    "marginal_log_means",
]

FAMILIES = ("marginal_nb", "rw_direct", "window_nb")
CLI_NAMES = {"nb": "marginal_nb", "rw": "rw_direct", "window": "window_nb"}

_SIGMA_SCALE = 1.0
_LEVEL_SD = 10.0
_THETA_A, _THETA_B = 2.0, 0.02


@dataclass(frozen=True)
class BaselineSpec:
    family: str
    d_max: int
    window: int | None = None
    d_prime: int | None = None  # marginal_nb only
    weekly: bool = True         # rw_direct only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.window is not None:
            if self.family != "window_nb":
                raise ValueError("a window length applies to window_nb only")
            if self.window < self.d_max:
                raise ValueError(f"window ({self.window}) must be at least d_max ({self.d_max})")

    def to_dict(self) -> dict:
        return asdict(self)


def rw1_logpdf(path, sd: float, first_sd: float | None = None) -> float:
    """Log density of a first-order random walk with innovation sd ``sd``.

    With ``first_sd`` the first value gets a ``Normal(0, first_sd**2)`` prior,
    otherwise the walk is conditioned on its first value.
    """
    x = np.asarray(path, dtype=float)
    inc = np.diff(x)
    lp = float(stats.norm.logpdf(inc, scale=sd).sum())
    if first_sd is not None and len(x):
        lp += float(stats.norm.logpdf(x[0], scale=first_sd))
    return lp


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------


class _Scale:
    """Adaptive random-walk scale and acceptance count for an array of scalar updates."""

    def __init__(self, shape, init: float):
        self.ls = np.full(shape, math.log(init))
        self.acc = np.zeros(shape, dtype=np.int64)

    def step(self, rng, cur):
        return cur + np.exp(self.ls) * rng.standard_normal(self.ls.shape)

    def decide(self, rng, delta, gamma: float, target: float, where=None):
        delta = np.where(np.isnan(delta), -np.inf, delta)
        ok = np.log(1.0 - rng.random(self.ls.shape)) < delta
        if where is not None:
            ok &= where
        self.acc += ok
        if gamma:
            upd = gamma * (np.exp(np.minimum(delta, 0.0)) - target)
            self.ls += upd if where is None else np.where(where, upd, 0.0)
        return ok


def _gamma_lp(x, a=_THETA_A, b=_THETA_B):
    return (a - 1.0) * np.log(x) - b * x


def _hn_lp(x, scale=_SIGMA_SCALE):
    return -0.5 * (x / scale) ** 2


def _empirical_fractions(z: np.ndarray, visible: np.ndarray, full: np.ndarray) -> np.ndarray:
    """(S, D) cumulative reporting fractions from complete rows."""
    T, S, D = z.shape
    cum = np.cumsum(z, axis=2)
    F = np.tile((np.arange(D) + 1.0) / D, (S, 1))
    for s in range(S):
        tot = z[full[:, s], s].sum()
        if tot >= 20:
            F[s] = cum[full[:, s], s].sum(axis=0) / tot
    F = np.clip(F, 0.02, 1.0)
    for d in range(1, D):
        F[:, d] = np.maximum(F[:, d], np.minimum(F[:, d - 1] + 0.005, 1.0))
    F[:, -1] = 1.0
    return F


def _rough_totals(z, visible, full, F):
    """Partial sums inflated by the expected reported fraction."""
    nvis = visible.sum(axis=2)
    idx = np.maximum(nvis - 1, 0)
    frac = np.take_along_axis(np.broadcast_to(F[None], z.shape), idx[:, :, None], axis=2)[:, :, 0]
    part = z.sum(axis=2)
    return np.where(full, part, np.where(nvis > 0, part / np.maximum(frac, 0.05), part)).astype(float)


def _nb_draw(rng, logm, theta):
    m = np.exp(logm)
    return rng.negative_binomial(theta, theta / (theta + m))


class _CellChain(ChainBase):
    """Common state for cell-level NB samplers: counts, likelihood mask, row log-likelihoods."""

    family = ""

    def __init__(self, ct: CensoredTriangle, cfg: McmcConfig, chain_index: int, rows: np.ndarray):
        super().__init__(cfg, chain_index)
        self.ct = ct
        self.rows = rows
        self.tgt = cfg.target_scalar

    def _ll_rows(self, logm, theta):
        """Row log-likelihoods up to terms that do not involve the cell means."""
        return kernels.nb_mean_loglik_rows(self.counts, self.mask, np.ascontiguousarray(logm), theta)

    def _theta_step(self, gamma):
        cur = np.log(self.theta)
        prop = self.sc_theta.step(self.rng, cur)
        th = np.exp(prop)
        logm = np.ascontiguousarray(self.logm)
        full_new = kernels.nb_loglik_rows(self.counts, self.mask, logm, th)
        full_cur = kernels.nb_loglik_rows(self.counts, self.mask, logm, self.theta)
        delta = (full_new - full_cur).sum(axis=0) + _gamma_lp(th) - _gamma_lp(self.theta) + prop - cur
        ok = self.sc_theta.decide(self.rng, delta, gamma, self.tgt)
        self.theta = np.where(ok, th, self.theta)
        self.ll = self._ll_rows(self.logm, self.theta)

    def _hidden_cell_draws(self, logm, theta):
        """Posterior predictive draws for cells outside the likelihood mask."""
        draws = _nb_draw(self.rng, logm, np.broadcast_to(theta[None, :, None], logm.shape))
        return np.where(self.pred_mask, draws, 0)


def _block_props(X, w, P, sig):
    """Initial RW proposal Cholesky factors from a Laplace-style curvature."""
    S = w.shape[1]
    kd = X.shape[1]
    out = np.empty((S, kd, kd))
    for s in range(S):
        H = X.T @ (w[:, s:s + 1] * X) + P / sig[s] ** 2
        try:
            cov = np.linalg.inv(H)
            out[s] = np.linalg.cholesky(0.5 * (cov + cov.T) * OPTIMAL_SCALE**2 / kd)
        except np.linalg.LinAlgError:
            out[s] = 0.05 * np.eye(kd)
    return out


class _Block:
    """Adaptive multivariate random-walk update for one smooth term (all regions)."""

    def __init__(self, L: np.ndarray):
        S, kd, _ = L.shape
        self.L = L
        self.sc = _Scale(S, 1.0)
        self.cov = BlockCovariance(S, kd)

    def step(self, rng, cur):
        eps = rng.standard_normal(cur.shape)
        return cur + np.exp(self.sc.ls)[:, None] * np.einsum("sij,sj->si", self.L, eps)

    def adapt_cov(self, it: int, cfg: McmcConfig, beta: np.ndarray):
        switch = cfg.cov_switch
        if it + 1 >= switch // 2 and it % 5 == 0:
            self.cov.add(beta)
        due = it + 1 == switch or (it + 1 > switch and (it + 1 - switch) % cfg.cov_every == 0)
        if due and self.cov.n >= 20:
            kd = beta.shape[1]
            self.L = self.cov.proposal_chol(slice(0, kd), self.L)
            if it + 1 == switch:
                self.sc.ls[:] = 0.0


def _quad(P, b):
    return np.einsum("si,ij,sj->s", b, P, b)


# ---------------------------------------------------------------------------
# marginal NB
# ---------------------------------------------------------------------------


def marginal_log_means(psi: np.ndarray, goff: np.ndarray, link: str) -> np.ndarray:
    """(..., nb + 1) log relative cell means: modelled delays then the remainder.

    ``mu[d] = nu[d] * prod_{j<d} (1 - nu[j])`` and the remainder carries
    ``prod_j (1 - nu[j])``, the same stick-breaking as the joint model.
    """
    nu, onu = relative_means(psi + goff[..., None], link)
    lo = np.log(onu)
    before = np.cumsum(lo, axis=-1) - lo
    return np.concatenate([np.log(nu) + before, lo.sum(axis=-1, keepdims=True)], axis=-1)


class _MarginalChain(_CellChain):
    family = "marginal_nb"

    def __init__(self, ct: CensoredTriangle, spec: ModelSpec, cfg: McmcConfig, chain_index: int):
        super().__init__(ct, cfg, chain_index, np.arange(ct.t0 + 1))
        self.spec = spec
        self.link = LINK_CODES[spec.link]
        self.model = Model.for_data(spec, ct)
        fd = prepare_data(self.model, ct)
        nb = self.model.n_bb
        self.nb = nb
        T, S, D = fd.z.shape
        vis = fd.visible
        counts = np.concatenate([fd.z[:, :, :nb], fd.z[:, :, nb:].sum(axis=2, keepdims=True)], axis=2)
        rem_seen = vis[:, :, nb:].all(axis=2)
        self.counts = np.ascontiguousarray(counts.astype(np.int64))
        self.mask = np.concatenate([vis[:, :, :nb], rem_seen[:, :, None]], axis=2)
        self.pred_mask = ~self.mask
        self.rem_partial = np.where(~rem_seen, fd.z[:, :, nb:].sum(axis=2), 0)
        self.partial = fd.z.sum(axis=2)
        # remainder cells with some visible delays are drawn from a truncated NB
        self.rem_trunc = (~rem_seen) & (self.rem_partial > 0)
        self.pred_mask[:, :, nb] &= ~self.rem_trunc

        init = initial_parameter_state(self.model, fd)
        rng = self.rng
        self.terms = [("f", n, t) for n, t in self.model.f_terms.items()] + [("g", n, t) for n, t in self.model.g_terms.items()]
        self.beta = []
        self.sig = np.empty((len(self.terms), S))
        for j, (tgt, name, term) in enumerate(self.terms):
            c = (init.f_terms if tgt == "f" else init.g_terms)[name]
            self.beta.append(c.coef_region @ term.Q + rng.normal(0, 0.1, (S, term.dim)))
            self.sig[j] = c.sigma_region * np.exp(rng.normal(0, 0.3, S))
        self.iota = init.iota + rng.normal(0, 0.2, S)
        psi = init.psi.copy()
        if nb:
            if spec.link == "survivor_probit" and nb > 1:
                inc = np.diff(psi, axis=1) * np.exp(rng.normal(0, 0.1, (S, nb - 1)))
                psi = np.concatenate([psi[:, :1] + rng.normal(0, 0.1, (S, 1)), np.zeros((S, nb - 1))], axis=1)
                psi[:, 1:] = psi[:, :1] + np.cumsum(inc, axis=1)
            else:
                psi = psi + rng.normal(0, 0.1, psi.shape)
        self.psi = psi
        self.theta = np.clip(init.theta * np.exp(rng.normal(0, 0.3, S)), 1.0, 500.0)
        self._recompute()

        lam = np.exp(self.eta)
        w_f = lam * self.theta / (lam + self.theta)
        h = 1e-3
        l0 = self._ll_rows(self._logm(self.eta, self.goff), self.theta)
        lp = self._ll_rows(self._logm(self.eta, self.goff + h), self.theta)
        lm = self._ll_rows(self._logm(self.eta, self.goff - h), self.theta)
        w_g = np.maximum(-(lp - 2 * l0 + lm) / h**2, 1e-6)
        self.blocks = [_Block(_block_props(term.Xr, w_f if tgt == "f" else w_g, term.P, self.sig[j]))
                       for j, (tgt, _, term) in enumerate(self.terms)]
        self.sc_iota = _Scale(S, 2.4 / math.sqrt(max(w_f.sum() / S, 1e-6)))
        self.sc_psi = _Scale((S, nb), 0.1)
        self.sc_theta = _Scale(S, 0.3)
        self.sc_sig = _Scale((len(self.terms), S), 0.5)

    # helpers --------------------------------------------------------------
    def _contrib(self, j):
        return self.terms[j][2].Xr @ self.beta[j].T

    def _recompute(self):
        T, S = self.counts.shape[:2]
        self.eta = self.iota[None, :] + np.zeros((T, S))
        self.goff = np.zeros((T, S))
        for j, (tgt, _, _) in enumerate(self.terms):
            if tgt == "f":
                self.eta = self.eta + self._contrib(j)
            else:
                self.goff = self.goff + self._contrib(j)
        self.logm = self._logm(self.eta, self.goff)
        self.ll = self._ll_rows(self.logm, self.theta)

    def _logm(self, eta, goff, psi=None):
        psi = self.psi if psi is None else psi
        return eta[:, :, None] + kernels.cell_log_means(psi, goff, self.link)

    def _try(self, eta, goff, psi, extra, gamma, scale, where=None, mean_only=False):
        if mean_only:
            # delay curve unchanged: shift the current cell means
            logm = self.logm + (eta - self.eta)[:, :, None]
        else:
            logm = self._logm(eta, goff, psi)
        new_ll = self._ll_rows(logm, self.theta)
        delta = (new_ll - self.ll).sum(axis=0) + extra
        ok = scale.decide(self.rng, delta, gamma, self.tgt, where)
        self.logm[:, ok] = logm[:, ok]
        self.ll[:, ok] = new_ll[:, ok]
        return ok

    # sweep ------------------------------------------------------------------
    def step(self, it, gamma):
        rng = self.rng
        for j, (tgt, _, term) in enumerate(self.terms):
            blk = self.blocks[j]
            cur = self.beta[j]
            prop = blk.step(rng, cur)
            d = term.Xr @ (prop - cur).T
            eta = self.eta + d if tgt == "f" else self.eta
            goff = self.goff + d if tgt == "g" else self.goff
            prior = -0.5 * (_quad(term.P, prop) - _quad(term.P, cur)) / self.sig[j] ** 2
            ok = self._try(eta, goff, self.psi, prior, gamma, blk.sc, mean_only=tgt == "f")
            self.beta[j] = np.where(ok[:, None], prop, cur)
            if tgt == "f":
                self.eta[:, ok] = eta[:, ok]
            else:
                self.goff[:, ok] = goff[:, ok]
        # intercept
        prop = self.sc_iota.step(rng, self.iota)
        eta = self.eta + (prop - self.iota)[None, :]
        prior = -0.5 * (prop**2 - self.iota**2) / _LEVEL_SD**2
        ok = self._try(eta, self.goff, self.psi, prior, gamma, self.sc_iota, mean_only=True)
        self.iota = np.where(ok, prop, self.iota)
        self.eta[:, ok] = eta[:, ok]
        # delay curve
        S, nb = self.psi.shape
        surv = self.spec.link == "survivor_probit"
        for d in range(nb):
            eps = np.exp(self.sc_psi.ls[:, d]) * rng.standard_normal(S)
            new = self.psi.copy()
            jac = 0.0
            if surv and d > 0:
                # log-increment move keeps the curve increasing
                inc = self.psi[:, d] - self.psi[:, d - 1]
                new_inc = inc * np.exp(eps)
                new[:, d:] += (new_inc - inc)[:, None]
                jac = np.log(new_inc) - np.log(inc)
            elif surv:
                new += eps[:, None]
            else:
                new[:, d] += eps
            prior = psi_logprior(new, _LEVEL_SD, self.spec.link) - psi_logprior(self.psi, _LEVEL_SD, self.spec.link)
            col = _Scale(S, 1.0)
            col.ls = self.sc_psi.ls[:, d].copy()
            col.acc = self.sc_psi.acc[:, d].copy()
            ok = self._try(self.eta, self.goff, new, prior + jac, gamma, col)
            self.sc_psi.ls[:, d] = col.ls
            self.sc_psi.acc[:, d] = col.acc
            self.psi[ok] = new[ok]
        self._theta_step(gamma)
        # smoothing parameters
        cur = np.log(self.sig)
        prop = self.sc_sig.step(rng, cur)
        sp = np.exp(prop)
        q = np.stack([_quad(t.P, self.beta[j]) for j, (_, _, t) in enumerate(self.terms)]) if self.terms else np.zeros((0, S))
        kd = np.array([t.dim for _, _, t in self.terms], dtype=float)[:, None]
        lp = lambda s, ls: _hn_lp(s) - kd * np.log(s) - 0.5 * q / s**2 + ls
        ok = self.sc_sig.decide(rng, lp(sp, prop) - lp(self.sig, cur), gamma, self.tgt)
        self.sig = np.where(ok, sp, self.sig)

    def end_of_iteration(self, it):
        for j, blk in enumerate(self.blocks):
            blk.adapt_cov(it, self.cfg, self.beta[j])

    def scales(self):
        d = {"ls_blk": [b.sc.ls.tolist() for b in self.blocks], "ls_iota": self.sc_iota.ls.tolist(),
             "ls_psi": self.sc_psi.ls.tolist(), "ls_theta": self.sc_theta.ls.tolist(), "ls_sig": self.sc_sig.ls.tolist()}
        return d

    def accept_counts(self):
        return {"blk": np.array([b.sc.acc for b in self.blocks]), "iota": self.sc_iota.acc, "psi": self.sc_psi.acc,
                "theta": self.sc_theta.acc, "sig": self.sc_sig.acc}

    def reset_counts(self):
        for sc in [b.sc for b in self.blocks] + [self.sc_iota, self.sc_psi, self.sc_theta, self.sc_sig]:
            sc.acc[...] = 0

    def record(self):
        cells = self._hidden_cell_draws(self.logm, self.theta)
        y = self.partial + cells.sum(axis=2)
        if self.rem_trunc.any():
            t, s = np.nonzero(self.rem_trunc)
            m = np.exp(self.logm[t, s, self.nb])
            th = self.theta[s]
            p = th / (th + m)
            lo = self.rem_partial[t, s]
            tail = stats.nbinom.sf(lo - 1, th, p)
            u = 1.0 - self.rng.random(len(t))
            r = stats.nbinom.isf(u * tail, th, p)
            r = np.maximum(np.where(np.isfinite(r), r, lo), lo).astype(np.int64)
            y[t, s] += r - lo
        full = _nb_draw(self.rng, self.logm, np.broadcast_to(self.theta[None, :, None], self.logm.shape)).sum(axis=2)
        out = {"lambda": np.exp(self.eta), "y": y, "y_rep": full, "theta": self.theta.copy(),
               "iota": self.iota.copy(), "psi": self.psi.copy()}
        for j, (tgt, name, term) in enumerate(self.terms):
            out[f"{tgt}.{name}"] = self.beta[j] @ term.Q.T
            out[f"sigma.{tgt}.{name}"] = self.sig[j].copy()
        return out


def _marginal_factory(ct, spec, cfg, chain_index):
    return _MarginalChain(ct, spec, cfg, chain_index)


def fit_marginal_nb(data: CensoredTriangle, cfg: McmcConfig, spec: ModelSpec | None = None) -> PosteriorSamples:
    """Independent-region marginal NB model sharing the joint model's mean and delay structure."""
    spec = ModelSpec(d_max=data.d_max) if spec is None else spec
    spec = replace(spec, nested=False, underreporting=None)
    meta = _meta(data, BaselineSpec("marginal_nb", data.d_max, d_prime=spec.d_prime))
    meta["spec"] = spec.to_dict()
    samples, _ = run_sampler(_Factory(_marginal_factory, data, spec, cfg), cfg, meta)
    return samples


# ---------------------------------------------------------------------------
# window NB
# ---------------------------------------------------------------------------


class _WindowChain(_CellChain):
    family = "window_nb"

    def __init__(self, ct: CensoredTriangle, window: int | None, cfg: McmcConfig, chain_index: int):
        r0 = 0 if window is None else max(0, ct.t0 - window + 1)
        super().__init__(ct, cfg, chain_index, np.arange(r0, ct.t0 + 1))
        self.r0 = r0
        z = ct.visible_z()[: ct.t0 + 1]
        vis = ct.visible[: ct.t0 + 1]
        full = ct.fully_observed[: ct.t0 + 1]
        self.partial_all = z.sum(axis=2)
        self.pred_all = ~vis
        zw, vw = z[r0:], vis[r0:]
        self.counts = np.ascontiguousarray(zw.astype(np.int64))
        self.mask = vw
        self.pred_mask = ~vw
        T, S, D = zw.shape
        F = _empirical_fractions(z, vis, full)
        prop = np.diff(np.concatenate([np.zeros((S, 1)), F], axis=1), axis=1)
        prop = np.maximum(prop, 1e-3)
        prop /= prop.sum(axis=1, keepdims=True)
        rng = self.rng
        self.b = np.log(prop[:, :-1]) - np.log(prop[:, -1:]) + rng.normal(0, 0.1, (S, D - 1))
        yh = _rough_totals(zw, vw, full[r0:], F)
        self.alpha = np.log(yh + 0.5) + rng.normal(0, 0.1, (T, S))
        self.tau = np.clip(np.std(np.diff(self.alpha, axis=0), axis=0) if T > 2 else np.full(S, 0.3), 0.05, 1.0)
        self.tau = self.tau * np.exp(rng.normal(0, 0.3, S))
        self.theta = np.full(S, 50.0) * np.exp(rng.normal(0, 0.3, S))
        self.logm = self._logm(self.alpha, self.b)
        self.ll = self._ll_rows(self.logm, self.theta)
        self.sc_alpha = _Scale((T, S), 0.3)
        self.sc_shift = _Scale(S, 0.05)
        self.sc_b = _Scale((S, max(D - 1, 0)), 0.2)
        self.sc_tau = _Scale(S, 0.3)
        self.sc_theta = _Scale(S, 0.3)

    @staticmethod
    def log_beta(b):
        full = np.concatenate([b, np.zeros(b.shape[:-1] + (1,))], axis=-1)
        m = full.max(axis=-1, keepdims=True)
        return full - m - np.log(np.exp(full - m).sum(axis=-1, keepdims=True))

    def _logm(self, alpha, b):
        return alpha[:, :, None] + self.log_beta(b)[None, :, :]

    def _rw_prior_sites(self, a, tau):
        """Per-site RW1 log prior terms touching each row, (T, S)."""
        inc = np.diff(a, axis=0)
        term = -0.5 * (inc / tau) ** 2
        out = np.zeros_like(a)
        out[1:] += term
        out[:-1] += term
        out[0] += -0.5 * (a[0] / _LEVEL_SD) ** 2
        return out

    def step(self, it, gamma):
        rng = self.rng
        T, S = self.alpha.shape
        for parity in (0, 1):
            site = (np.arange(T) % 2 == parity)[:, None] & np.ones((1, S), bool)
            prop = np.where(site, self.sc_alpha.step(rng, self.alpha), self.alpha)
            logm = self._logm(prop, self.b)
            new_ll = self._ll_rows(logm, self.theta)
            delta = new_ll - self.ll + self._rw_prior_sites(prop, self.tau) - self._rw_prior_sites(self.alpha, self.tau)
            ok = self.sc_alpha.decide(rng, delta, gamma, self.tgt, where=site)
            self.alpha = np.where(ok, prop, self.alpha)
            self.logm = np.where(ok[:, :, None], logm, self.logm)
            self.ll = np.where(ok, new_ll, self.ll)
        # whole-curve shift
        c = self.sc_shift.step(rng, np.zeros(S))
        prop = self.alpha + c[None, :]
        logm = self._logm(prop, self.b)
        new_ll = self._ll_rows(logm, self.theta)
        delta = (new_ll - self.ll).sum(axis=0) - 0.5 * (prop[0] ** 2 - self.alpha[0] ** 2) / _LEVEL_SD**2
        ok = self.sc_shift.decide(rng, delta, gamma, self.tgt)
        self.alpha[:, ok] = prop[:, ok]
        self.logm[:, ok] = logm[:, ok]
        self.ll[:, ok] = new_ll[:, ok]
        # delay proportions
        for j in range(self.b.shape[1]):
            new = self.b.copy()
            new[:, j] += np.exp(self.sc_b.ls[:, j]) * rng.standard_normal(S)
            logm = self._logm(self.alpha, new)
            new_ll = self._ll_rows(logm, self.theta)
            # uniform Dirichlet prior in the additive log-ratio coordinates: prod beta_d
            delta = (new_ll - self.ll).sum(axis=0) + self.log_beta(new).sum(axis=1) - self.log_beta(self.b).sum(axis=1)
            col = _Scale(S, 1.0)
            col.ls, col.acc = self.sc_b.ls[:, j].copy(), self.sc_b.acc[:, j].copy()
            ok = col.decide(rng, delta, gamma, self.tgt)
            self.sc_b.ls[:, j], self.sc_b.acc[:, j] = col.ls, col.acc
            self.b[ok] = new[ok]
            self.logm[:, ok] = logm[:, ok]
            self.ll[:, ok] = new_ll[:, ok]
        # random-walk sd
        cur = np.log(self.tau)
        prop = self.sc_tau.step(rng, cur)
        tp = np.exp(prop)
        inc = np.diff(self.alpha, axis=0)
        n = inc.shape[0]
        lp = lambda tau, l: _hn_lp(tau) - n * np.log(tau) - 0.5 * (inc**2).sum(axis=0) / tau**2 + l
        ok = self.sc_tau.decide(rng, lp(tp, prop) - lp(self.tau, cur), gamma, self.tgt)
        self.tau = np.where(ok, tp, self.tau)
        self._theta_step(gamma)

    def scales(self):
        return {"ls_alpha": self.sc_alpha.ls.tolist(), "ls_shift": self.sc_shift.ls.tolist(), "ls_b": self.sc_b.ls.tolist(),
                "ls_tau": self.sc_tau.ls.tolist(), "ls_theta": self.sc_theta.ls.tolist()}

    def accept_counts(self):
        return {"alpha": self.sc_alpha.acc, "shift": self.sc_shift.acc, "b": self.sc_b.acc, "tau": self.sc_tau.acc,
                "theta": self.sc_theta.acc}

    def reset_counts(self):
        for sc in (self.sc_alpha, self.sc_shift, self.sc_b, self.sc_tau, self.sc_theta):
            sc.acc[...] = 0

    def record(self):
        # rows before the window are complete unless cells were lost; those use the first window row's mean
        T_all = self.ct.t0 + 1
        lb = self.log_beta(self.b)
        alpha_all = np.concatenate([np.repeat(self.alpha[:1], self.r0, axis=0), self.alpha], axis=0)
        logm = alpha_all[:, :, None] + lb[None]
        th = np.broadcast_to(self.theta[None, :, None], logm.shape)
        draws = _nb_draw(self.rng, logm, th)
        y = self.partial_all + np.where(self.pred_all, draws, 0).sum(axis=2)
        rep = _nb_draw(self.rng, logm, th).sum(axis=2)
        return {"lambda": np.exp(self.alpha), "y": y[:T_all], "y_rep": rep, "theta": self.theta.copy(),
                "beta": np.exp(lb), "tau": self.tau.copy(), "alpha_last": self.alpha[-1].copy()}


def _window_factory(ct, window, cfg, chain_index):
    return _WindowChain(ct, window, cfg, chain_index)


def fit_window_nb(data: CensoredTriangle, cfg: McmcConfig, window: int | None = None) -> PosteriorSamples:
    """Random-walk epidemic curve with a fixed delay simplex, optionally on the last ``window`` rows."""
    bspec = BaselineSpec("window_nb", data.d_max, window=window)
    meta = _meta(data, bspec)
    meta["window_start"] = 0 if window is None else max(0, data.t0 - window + 1)
    samples, _ = run_sampler(_Factory(_window_factory, data, window, cfg), cfg, meta)
    return samples


# ---------------------------------------------------------------------------
# direct random-walk NB
# ---------------------------------------------------------------------------


class _RWChain(_CellChain):
    family = "rw_direct"

    def __init__(self, ct: CensoredTriangle, weekly: bool, cfg: McmcConfig, chain_index: int):
        super().__init__(ct, cfg, chain_index, np.arange(ct.t0 + 1))
        z = ct.visible_z()[: ct.t0 + 1]
        vis = ct.visible[: ct.t0 + 1]
        full = ct.fully_observed[: ct.t0 + 1]
        T, S, D = z.shape
        self.counts = np.ascontiguousarray(z.astype(np.int64))
        self.mask = vis
        self.pred_mask = ~vis
        self.partial = z.sum(axis=2)
        rng = self.rng
        F = _empirical_fractions(z, vis, full)
        prop = np.maximum(np.diff(np.concatenate([np.zeros((S, 1)), F], axis=1), axis=1), 1e-3)
        yh = _rough_totals(z, vis, full, F)
        ly = np.log(yh + 0.5)
        self.iota = ly[0] + np.log(prop[:, 0]) + rng.normal(0, 0.2, S)
        self.delta = ly - ly[:1]
        self.delta[1:] += rng.normal(0, 0.1, (T - 1, S))
        self.beta = (np.log(prop) - np.log(prop[:, :1])).T.copy()  # (D, S)
        self.beta[1:] += rng.normal(0, 0.1, (D - 1, S))
        self.gamma = np.zeros((T, D, S))
        self.weekly = weekly
        if weekly:
            m = Model(ModelSpec(d_max=max(D, 2), f_terms=(), g_terms=(TermSpec("weekly"),)), T, S, ct.time_origin)
            self.wterm = m.g_terms["weekly"]
            self.xi = rng.normal(0, 0.05, (S, self.wterm.dim))
        else:
            self.wterm = None
            self.xi = np.zeros((S, 0))
        self.sig = np.exp(rng.normal(math.log(0.2), 0.3, (4, S)))  # delta, beta, gamma, xi
        self.theta = np.full(S, 50.0) * np.exp(rng.normal(0, 0.3, S))
        self._recompute()
        lam = np.exp(self.logm)
        w = np.where(self.mask, lam * self.theta[None, :, None] / (lam + self.theta[None, :, None]), 0.0).sum(axis=2)
        if weekly:
            self.xblk = _Block(_block_props(self.wterm.Xr, w, self.wterm.P, self.sig[3]))
        self.sc_iota = _Scale(S, 0.1)
        self.sc_delta = _Scale((T, S), 0.2)
        self.sc_beta = _Scale((D, S), 0.2)
        self.sc_gamma = _Scale((T, D, S), 0.3)
        self.sc_anchor_d = _Scale(S, 0.05)
        self.sc_anchor_g = _Scale((D, S), 0.05)
        self.sc_sig = _Scale((4, S), 0.5)
        self.sc_theta = _Scale(S, 0.3)

    def _xi_t(self, xi):
        return self.wterm.Xr @ xi.T if self.weekly else 0.0

    def _logm_from(self, iota, delta, beta, gamma, xi_t):
        base = iota[None, :] + delta + xi_t
        return np.ascontiguousarray(np.transpose(base[:, None, :] + beta[None, :, :] + gamma, (0, 2, 1)))

    def _recompute(self):
        self.xit = self._xi_t(self.xi)
        self.logm = self._logm_from(self.iota, self.delta, self.beta, self.gamma, self.xit)
        self.ll = self._ll_rows(self.logm, self.theta)

    def _cell_ll(self, logm):
        th = self.theta[None, :, None]
        m = np.exp(logm)
        v = self.counts * (logm - np.log(th + m)) - th * np.log1p(m / th)
        return np.where(self.mask, v, 0.0)

    def _accept_rows(self, ok_rows, logm, new_ll):
        self.logm = np.where(ok_rows[:, :, None], logm, self.logm)
        self.ll = np.where(ok_rows, new_ll, self.ll)

    @staticmethod
    def _rw_sites(x, sd, axis):
        """RW1 log prior terms touching each site along ``axis`` (first site anchored)."""
        inc = np.diff(x, axis=axis)
        term = -0.5 * (inc / sd) ** 2
        out = np.zeros_like(x)
        sl_hi = [slice(None)] * x.ndim
        sl_lo = [slice(None)] * x.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        out[tuple(sl_hi)] += term
        out[tuple(sl_lo)] += term
        return out

    def step(self, it, gamma):
        rng = self.rng
        T, D, S = self.gamma.shape
        sd_d, sd_b, sd_g, sd_x = self.sig
        # intercept
        prop = self.sc_iota.step(rng, self.iota)
        logm = self.logm + (prop - self.iota)[None, :, None]
        new_ll = self._ll_rows(logm, self.theta)
        delta = (new_ll - self.ll).sum(axis=0) - 0.5 * (prop**2 - self.iota**2) / _LEVEL_SD**2
        ok = self.sc_iota.decide(rng, delta, gamma, self.tgt)
        self.iota = np.where(ok, prop, self.iota)
        self._accept_rows(np.broadcast_to(ok, (T, S)), logm, new_ll)
        # level/walk trade-off: shift iota and the free part of delta in opposite directions
        c = self.sc_anchor_d.step(rng, np.zeros(S))
        newd = self.delta.copy()
        newd[1:] -= c
        logm = self.logm.copy()
        logm[0] += c[:, None]
        new_ll = self._ll_rows(logm, self.theta)
        dprior = -0.5 * ((self.iota + c) ** 2 - self.iota**2) / _LEVEL_SD**2
        if T > 1:
            dprior = dprior - 0.5 * ((newd[1] - newd[0]) ** 2 - (self.delta[1] - self.delta[0]) ** 2) / sd_d**2
        ok = self.sc_anchor_d.decide(rng, (new_ll - self.ll).sum(axis=0) + dprior, gamma, self.tgt)
        self.iota = np.where(ok, self.iota + c, self.iota)
        self.delta[:, ok] = newd[:, ok]
        self._accept_rows(np.broadcast_to(ok, (T, S)), logm, new_ll)
        # temporal walk, checkerboard over rows
        for parity in (0, 1):
            site = ((np.arange(T) % 2 == parity) & (np.arange(T) > 0))[:, None] & np.ones((1, S), bool)
            prop = np.where(site, self.sc_delta.step(rng, self.delta), self.delta)
            logm = self.logm + (prop - self.delta)[:, :, None]
            new_ll = self._ll_rows(logm, self.theta)
            d = new_ll - self.ll + self._rw_sites(prop, sd_d, 0) - self._rw_sites(self.delta, sd_d, 0)
            ok = self.sc_delta.decide(rng, d, gamma, self.tgt, where=site)
            self.delta = np.where(ok, prop, self.delta)
            self._accept_rows(ok, logm, new_ll)
        # delay walk, checkerboard over delays
        for parity in (0, 1):
            site = ((np.arange(D) % 2 == parity) & (np.arange(D) > 0))[:, None] & np.ones((1, S), bool)
            if not site.any():
                continue
            prop = np.where(site, self.sc_beta.step(rng, self.beta), self.beta)
            logm = self.logm + (prop - self.beta).T[None, :, :]
            cl_new, cl_old = self._cell_ll(logm), self._cell_ll(self.logm)
            d = (cl_new - cl_old).sum(axis=0).T + self._rw_sites(prop, sd_b, 0) - self._rw_sites(self.beta, sd_b, 0)
            ok = self.sc_beta.decide(rng, d, gamma, self.tgt, where=site)
            self.beta = np.where(ok, prop, self.beta)
            self.logm = np.where(ok.T[None], logm, self.logm)
        # time-within-delay walks, checkerboard over rows
        if D > 1:
            for parity in (0, 1):
                site = ((np.arange(T) % 2 == parity) & (np.arange(T) > 0))[:, None, None] & (np.arange(D) > 0)[None, :, None]
                site = np.broadcast_to(site, self.gamma.shape)
                prop = np.where(site, self.sc_gamma.step(rng, self.gamma), self.gamma)
                logm = self.logm + np.transpose(prop - self.gamma, (0, 2, 1))
                d = np.transpose(self._cell_ll(logm) - self._cell_ll(self.logm), (0, 2, 1))
                d = d + self._rw_sites(prop, sd_g, 0) - self._rw_sites(self.gamma, sd_g, 0)
                ok = self.sc_gamma.decide(rng, d, gamma, self.tgt, where=site)
                self.gamma = np.where(ok, prop, self.gamma)
                self.logm = np.where(np.transpose(ok, (0, 2, 1)), logm, self.logm)
            # per-delay trade-off between beta[d] and its time walk, checkerboard over delays
            for parity in (0, 1):
                where = np.broadcast_to(((np.arange(D) % 2 == parity) & (np.arange(D) > 0))[:, None], (D, S))
                if not where.any():
                    continue
                c = np.where(where, self.sc_anchor_g.step(rng, np.zeros((D, S))), 0.0)
                newg = self.gamma.copy()
                newg[1:] -= c[None]
                logm = self.logm.copy()
                logm[0] += c.T
                d = (self._cell_ll(logm) - self._cell_ll(self.logm)).sum(axis=0).T
                bp = self.beta + c
                d = d + (self._rw_sites(bp, sd_b, 0) - self._rw_sites(self.beta, sd_b, 0))
                if T > 1:
                    d = d - 0.5 * ((newg[1] - newg[0]) ** 2 - (self.gamma[1] - self.gamma[0]) ** 2) / sd_g**2
                ok = self.sc_anchor_g.decide(rng, d, gamma, self.tgt, where=where)
                self.beta = np.where(ok, bp, self.beta)
                self.gamma = np.where(ok[None], newg, self.gamma)
                self.logm = np.where(ok.T[None], logm, self.logm)
        self.ll = self._ll_rows(self.logm, self.theta)
        # weekly smooth
        if self.weekly:
            prop = self.xblk.step(rng, self.xi)
            xit = self._xi_t(prop)
            logm = self.logm + (xit - self.xit)[:, :, None]
            new_ll = self._ll_rows(logm, self.theta)
            P = self.wterm.P
            d = (new_ll - self.ll).sum(axis=0) - 0.5 * (_quad(P, prop) - _quad(P, self.xi)) / sd_x**2
            ok = self.xblk.sc.decide(rng, d, gamma, self.tgt)
            self.xi = np.where(ok[:, None], prop, self.xi)
            self.xit = np.where(ok[None], xit, self.xit)
            self._accept_rows(np.broadcast_to(ok, (T, S)), logm, new_ll)
        # smoothing sds
        cur = np.log(self.sig)
        prop = self.sc_sig.step(rng, cur)
        sp = np.exp(prop)
        ss = np.stack([
            (np.diff(self.delta, axis=0) ** 2).sum(axis=0),
            (np.diff(self.beta, axis=0) ** 2).sum(axis=0),
            (np.diff(self.gamma[:, 1:], axis=0) ** 2).sum(axis=(0, 1)),
            _quad(self.wterm.P, self.xi) if self.weekly else np.zeros(S),
        ])
        n = np.array([T - 1, D - 1, (T - 1) * (D - 1), self.xi.shape[1]], dtype=float)[:, None]
        lp = lambda s, l: np.where(n > 0, _hn_lp(s) - n * np.log(s) - 0.5 * ss / s**2, 0.0) + l
        active = np.broadcast_to(n > 0, self.sig.shape)
        ok = self.sc_sig.decide(rng, lp(sp, prop) - lp(self.sig, cur), gamma, self.tgt, where=active)
        self.sig = np.where(ok, sp, self.sig)
        self._theta_step(gamma)

    def end_of_iteration(self, it):
        if self.weekly:
            self.xblk.adapt_cov(it, self.cfg, self.xi)

    def scales(self):
        out = {n: getattr(self, "sc_" + n).ls.tolist() for n in ("iota", "delta", "beta", "gamma", "sig", "theta")}
        if self.weekly:
            out["xi"] = self.xblk.sc.ls.tolist()
        return out

    def accept_counts(self):
        out = {n: getattr(self, "sc_" + n).acc for n in ("iota", "anchor_d", "delta", "beta", "gamma", "anchor_g", "sig", "theta")}
        if self.weekly:
            out["xi"] = self.xblk.sc.acc
        return out

    def reset_counts(self):
        for n in ("iota", "anchor_d", "delta", "beta", "gamma", "anchor_g", "sig", "theta"):
            getattr(self, "sc_" + n).acc[...] = 0
        if self.weekly:
            self.xblk.sc.acc[...] = 0

    def record(self):
        th = np.broadcast_to(self.theta[None, :, None], self.logm.shape)
        y = self.partial + np.where(self.pred_mask, _nb_draw(self.rng, self.logm, th), 0).sum(axis=2)
        rep = _nb_draw(self.rng, self.logm, th).sum(axis=2)
        out = {"lambda": np.exp(self.logm).sum(axis=2), "y": y, "y_rep": rep, "theta": self.theta.copy(),
               "iota": self.iota.copy(), "delta_last": self.delta[-1].copy(), "beta": self.beta.T.copy(),
               "gamma_last": self.gamma[-1].T.copy(), "sigma": self.sig.T.copy()}
        if self.weekly:
            out["xi"] = self.xi @ self.wterm.Q.T
        return out


def _rw_factory(ct, weekly, cfg, chain_index):
    return _RWChain(ct, weekly, cfg, chain_index)


def fit_rw_direct(data: CensoredTriangle, cfg: McmcConfig, weekly: bool = True) -> PosteriorSamples:
    """Direct NB cell model with random-walk time, delay and time-by-delay effects."""
    bspec = BaselineSpec("rw_direct", data.d_max, weekly=weekly)
    samples, _ = run_sampler(_Factory(_rw_factory, data, weekly, cfg), cfg, _meta(data, bspec))
    return samples


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


class _Factory:
    """Picklable ``chain_index -> chain`` builder for the process pool."""

    def __init__(self, fn, data, option, cfg):
        self.fn, self.data, self.option, self.cfg = fn, data, option, cfg

    def __call__(self, chain_index):
        return self.fn(self.data, self.option, self.cfg, chain_index)


def _meta(data: CensoredTriangle, bspec: BaselineSpec) -> dict:
    return {
        "family": bspec.family,
        "baseline": bspec.to_dict(),
        "t0": int(data.t0),
        "time_origin": data.time_origin.isoformat(),
        "regions": list(data.regions),
        "n_rows": int(data.n_rows),
        "d_max": int(data.d_max),
    }


def fit_baseline(spec: BaselineSpec, data: CensoredTriangle, cfg: McmcConfig, model_spec: ModelSpec | None = None) -> PosteriorSamples:
    if spec.d_max != data.d_max:
        raise ValueError(f"baseline d_max={spec.d_max} but data has d_max={data.d_max}")
    if spec.family == "marginal_nb":
        ms = model_spec or ModelSpec(d_max=data.d_max, d_prime=spec.d_prime)
        return fit_marginal_nb(data, cfg, ms)
    if spec.family == "window_nb":
        return fit_window_nb(data, cfg, spec.window)
    return fit_rw_direct(data, cfg, spec.weekly)


# ---------------------------------------------------------------------------
# forecasting and replication hooks
# ---------------------------------------------------------------------------


def _future_cells_sum(rng, logm, theta):
    th = np.broadcast_to(theta[:, None, :, None], logm.shape)
    return _nb_draw(rng, logm, th).sum(axis=3)


def _marginal_forecast(samples, data, rows, rng):
    from .prediction import _gdm_log_lambda

    spec = ModelSpec.from_dict(samples.meta["spec"])
    eta = _gdm_log_lambda(samples, rows)
    import datetime as dt

    model = Model(spec, samples.meta["n_rows"], len(samples.meta["regions"]), dt.date.fromisoformat(samples.meta["time_origin"]))
    goff = np.zeros_like(eta)
    for name, term in model.g_terms.items():
        X = model.design(term, rows) @ term.Q.T
        goff = goff + np.einsum("tk,nsk->nts", X, samples.flat(f"g.{name}"))
    psi = samples.flat("psi")[:, None, :, :]
    logm = eta[..., None] + marginal_log_means(psi, goff, spec.link)
    return _future_cells_sum(rng, logm, samples.flat("theta"))


def _window_forecast(samples, data, rows, rng):
    t0 = samples.meta["t0"]
    h = np.asarray(rows) - t0
    a0 = samples.flat("alpha_last")
    tau = samples.flat("tau")
    n = a0.shape[0]
    steps = rng.standard_normal((n, int(h.max()), a0.shape[1])) * tau[:, None, :]
    alpha = a0[:, None, :] + np.cumsum(steps, axis=1)[:, h - 1]
    logm = alpha[..., None] + np.log(samples.flat("beta"))[:, None, :, :]
    return _future_cells_sum(rng, logm, samples.flat("theta"))


def _rw_forecast(samples, data, rows, rng):
    import datetime as dt

    t0 = samples.meta["t0"]
    h = np.asarray(rows) - t0
    H = int(h.max())
    sig = samples.flat("sigma")  # (n, S, 4)
    n, S = sig.shape[:2]
    dl = samples.flat("delta_last")[:, None, :] + np.cumsum(rng.standard_normal((n, H, S)) * sig[:, None, :, 0], axis=1)[:, h - 1]
    gl = samples.flat("gamma_last")  # (n, S, D)
    D = gl.shape[2]
    gsteps = rng.standard_normal((n, H, S, D)) * sig[:, None, :, 2:3]
    gsteps[..., 0] = 0.0
    gam = gl[:, None] + np.cumsum(gsteps, axis=1)[:, h - 1]
    base = samples.flat("iota")[:, None, :] + dl
    if "xi" in samples:
        origin = dt.date.fromisoformat(samples.meta["time_origin"])
        m = Model(ModelSpec(d_max=max(samples.meta["d_max"], 2), f_terms=(), g_terms=(TermSpec("weekly"),)),
                  samples.meta["n_rows"], S, origin)
        term = m.g_terms["weekly"]
        X = m.design(term, rows) @ term.Q.T
        base = base + np.einsum("tk,nsk->nts", X, samples.flat("xi"))
    logm = base[..., None] + samples.flat("beta")[:, None] + gam
    return _future_cells_sum(rng, logm, samples.flat("theta"))


def _replicate(samples, rows, rng):
    return samples.flat("y_rep")[:, rows]


def _register():
    from .prediction import FORECASTERS, REPLICATORS

    FORECASTERS.update({"marginal_nb": _marginal_forecast, "window_nb": _window_forecast, "rw_direct": _rw_forecast})
    for fam in FAMILIES:
        REPLICATORS[fam] = _replicate


_register()
