"""Hot numeric kernels of the sampler.

Every kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. The public names dispatch to one of the two
according to :data:`gdmnowcast._compat.USE_NUMBA`; both routes are importable
directly (``*_jit`` / ``*_np``) so tests and the benchmark can compare them.

Array conventions
-----------------
``T`` rows (event times), ``S`` regions, ``D`` delay columns. Counts are
``int64``; everything else ``float64``.
"""

import math

import numpy as np
from scipy.special import gammaln, log_ndtr

from ._compat import HAS_NUMBA, USE_NUMBA, njit

__all__ = [
    "log_ndtr_scalar",
    "lgamma_ratio",
    "delay_loglik",
    "nb_region_loglik",
    "nb_loglik_rows",
    "nb_mean_loglik_rows",
    "cell_log_means",
    "betabin_loglik_sums",
    "sample_latent_rows",
    "latent_row_logweights",
    "BACKEND",
]

# log(1e-15): enumeration stops once weights fall this far below the mode
_TAIL_LOG = -34.5
_HARD_SPAN = 2_000_000


# ---------------------------------------------------------------------------
# scalar helpers
# ---------------------------------------------------------------------------

_SQRT1_2 = 0.7071067811865476
_HALF_LOG_2PI = 0.9189385332046727


@njit(cache=True)
def log_ndtr_scalar(x):
    """log of the standard normal CDF, accurate in both tails."""
    if x > 6.0:
        return math.log1p(-0.5 * math.erfc(x * _SQRT1_2))
    if x > -37.0:
        return math.log(0.5 * math.erfc(-x * _SQRT1_2))
    t2 = x * x
    inv = 1.0 / t2
    series = 1.0 - inv * (1.0 - inv * (3.0 - inv * (15.0 - inv * (105.0 - inv * 945.0))))
    return -0.5 * t2 - math.log(-x) - _HALF_LOG_2PI + math.log(series)


@njit(cache=True)
def lgamma_ratio(x, m):
    """``lgamma(x + m) - lgamma(x)`` for integer ``m >= 0``; a product for small ``m``."""
    if m <= 0:
        return 0.0
    if m <= 16:
        p = x
        for i in range(1, m):
            p *= x + i
        return math.log(p)
    return math.lgamma(x + m) - math.lgamma(x)


# ---------------------------------------------------------------------------
# Delay (GDM) log-likelihood with the relative means computed in place
# ---------------------------------------------------------------------------

_NU_EPS = 1e-12
_LOG_NU_EPS = math.log(_NU_EPS)


@njit(cache=True)
def delay_region_jit(s, z, y, k, goff, psi_row, phi_row, link, d_lo, d_hi, ll, norm, with_norm):
    """Add region ``s`` Beta-Binomial terms of columns ``[d_lo, d_hi)`` into ``ll``/``norm``.

    ``ll`` collects the terms that depend on the relative means, ``norm`` the
    ``lgamma(phi) - lgamma(n + phi)`` normalisers. ``link`` 0 is the probit
    survivor link, 1 the logit hazard link.
    """
    T = z.shape[0]
    for t in range(T):
        kk = k[t, s]
        if kk <= d_lo:
            continue
        top = kk if kk < d_hi else d_hi
        n = y[t, s]
        for d in range(d_lo):
            n -= z[t, s, d]
        g = goff[t, s]
        prev = 0.0
        if link == 0 and d_lo > 0:
            prev = log_ndtr_scalar(-(psi_row[d_lo - 1] + g))
        for d in range(d_lo, top):
            xv = psi_row[d] + g
            if link == 0:
                lq = log_ndtr_scalar(-xv)
                lo = lq - prev
                prev = lq
                onu = math.exp(lo)
                nu = -math.expm1(lo)
            else:
                nu = 1.0 / (1.0 + math.exp(-xv))
                onu = 1.0 / (1.0 + math.exp(xv))
            if nu < _NU_EPS:
                nu = _NU_EPS
            if onu < _NU_EPS:
                onu = _NU_EPS
            ph = phi_row[d]
            zz = z[t, s, d]
            ll[d] += lgamma_ratio(nu * ph, zz) + lgamma_ratio(onu * ph, n - zz)
            if with_norm:
                norm[d] -= lgamma_ratio(ph, n)
            n -= zz


@njit(cache=True)
def delay_loglik_jit(z, y, k, goff, psi, phi, link, d_from, with_norm):
    S, nb = psi.shape
    ll = np.zeros((S, nb))
    norm = np.zeros((S, nb))
    for s in range(S):
        delay_region_jit(s, z, y, k, goff, psi[s], phi[s], link, d_from, nb, ll[s], norm[s], with_norm)
    return ll, norm


def _lgamma_ratio_np(x, m):
    return gammaln(x + m) - gammaln(x)


def delay_loglik_np(z, y, k, goff, psi, phi, link, d_from, with_norm):
    S, nb = psi.shape
    if nb == 0:
        return np.zeros((S, 0)), np.zeros((S, 0))
    lin = psi[None, :, :] + goff[:, :, None]
    if link == 0:
        log_q = log_ndtr(-lin)
        prev = np.concatenate([np.zeros(lin.shape[:2] + (1,)), log_q[:, :, :-1]], axis=2)
        onu = np.exp(log_q - prev)
        nu = -np.expm1(log_q - prev)
    else:
        nu = 1.0 / (1.0 + np.exp(-lin))
        onu = 1.0 / (1.0 + np.exp(lin))
    nu = np.maximum(nu, _NU_EPS)
    onu = np.maximum(onu, _NU_EPS)
    zf = z[:, :, :nb].astype(np.float64)
    n = y[:, :, None] - (np.cumsum(zf, axis=2) - zf)
    ph = phi[None, :, :]
    d_idx = np.arange(nb)[None, None, :]
    active = (d_idx < k[:, :, None]) & (d_idx >= d_from)
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = _lgamma_ratio_np(nu * ph, zf) + _lgamma_ratio_np(onu * ph, n - zf)
        ll = np.where(active, terms, 0.0).sum(axis=0)
        if with_norm:
            norm = np.where(active, -_lgamma_ratio_np(ph, n), 0.0).sum(axis=0)
        else:
            norm = np.zeros((S, nb))
    return ll, norm


# ---------------------------------------------------------------------------
# Negative-Binomial totals per region (without the lgamma(y + 1) constant)
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_region_jit(s, count, eta, theta_s):
    T = count.shape[0]
    acc = 0.0
    c_th = theta_s * math.log(theta_s)
    for t in range(T):
        c = count[t, s]
        e = eta[t, s]
        acc += lgamma_ratio(theta_s, c) + c_th + c * e - (c + theta_s) * math.log(theta_s + math.exp(e))
    return acc


@njit(cache=True)
def nb_region_loglik_jit(count, eta, theta):
    S = theta.shape[0]
    out = np.empty(S)
    for s in range(S):
        out[s] = nb_region_jit(s, count, eta, theta[s])
    return out


def nb_region_loglik_np(count, eta, theta):
    th = theta[None, :]
    c = count.astype(np.float64)
    terms = _lgamma_ratio_np(th, c) + th * np.log(th) + c * eta - (c + th) * np.log(th + np.exp(eta))
    return terms.sum(axis=0)


# ---------------------------------------------------------------------------
# Negative-Binomial cell log-likelihood, summed over the cell axis
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_loglik_rows_jit(counts, mask, log_mean, theta):
    T, S, C = counts.shape
    out = np.zeros((T, S))
    for s in range(S):
        th = theta[s]
        lg_th = math.lgamma(th)
        for t in range(T):
            acc = 0.0
            for c in range(C):
                if not mask[t, s, c]:
                    continue
                y = float(counts[t, s, c])
                eta = log_mean[t, s, c]
                lam = math.exp(eta)
                acc += (
                    math.lgamma(y + th)
                    - lg_th
                    - math.lgamma(y + 1.0)
                    - th * math.log1p(lam / th)
                    + y * (eta - math.log(th + lam))
                )
            out[t, s] = acc
    return out


def nb_loglik_rows_np(counts, mask, log_mean, theta):
    y = counts.astype(np.float64)
    th = np.broadcast_to(np.asarray(theta, dtype=np.float64)[None, :, None], y.shape)
    lam = np.exp(log_mean)
    terms = (
        gammaln(y + th)
        - gammaln(th)
        - gammaln(y + 1.0)
        - th * np.log1p(lam / th)
        + y * (log_mean - np.log(th + lam))
    )
    return np.where(mask, terms, 0.0).sum(axis=2)


@njit(cache=True)
def nb_mean_loglik_rows_jit(counts, mask, log_mean, theta):
    """Mean-dependent part of :func:`nb_loglik_rows_jit` (no gamma-function terms)."""
    T, S, C = counts.shape
    out = np.zeros((T, S))
    for s in range(S):
        th = theta[s]
        for t in range(T):
            acc = 0.0
            for c in range(C):
                if not mask[t, s, c]:
                    continue
                eta = log_mean[t, s, c]
                lam = math.exp(eta)
                acc += counts[t, s, c] * (eta - math.log(th + lam)) - th * math.log1p(lam / th)
            out[t, s] = acc
    return out


def nb_mean_loglik_rows_np(counts, mask, log_mean, theta):
    y = counts.astype(np.float64)
    th = np.asarray(theta, dtype=np.float64)[None, :, None]
    lam = np.exp(log_mean)
    terms = y * (log_mean - np.log(th + lam)) - th * np.log1p(lam / th)
    return np.where(mask, terms, 0.0).sum(axis=2)


@njit(cache=True)
def cell_log_means_jit(psi, goff, link):
    """(T, S, nb + 1) log relative cell means: stick-broken delays then the remainder."""
    T, S = goff.shape
    nb = psi.shape[1]
    out = np.empty((T, S, nb + 1))
    for t in range(T):
        for s in range(S):
            before = 0.0
            prev_lq = 0.0
            for d in range(nb):
                lin = psi[s, d] + goff[t, s]
                if link == 0:
                    lq = log_ndtr_scalar(-lin)
                    lo = lq - prev_lq
                    prev_lq = lq
                    lnu = math.log(max(-math.expm1(lo), _NU_EPS))
                else:
                    e = math.log1p(math.exp(-abs(lin)))
                    lnu = -e + (lin if lin < 0 else 0.0)
                    lo = -e - (lin if lin > 0 else 0.0)
                    lnu = max(lnu, _LOG_NU_EPS)
                out[t, s, d] = lnu + before
                before += max(lo, _LOG_NU_EPS)
            out[t, s, nb] = before
    return out


def cell_log_means_np(psi, goff, link):
    lin = psi[None, :, :] + goff[:, :, None]
    if link == 0:
        lq = log_ndtr(-lin)
        prev = np.concatenate([np.zeros(lin.shape[:-1] + (1,)), lq[..., :-1]], axis=-1)
        onu = np.exp(lq - prev)
        nu = -np.expm1(lq - prev)
    else:
        nu = 1.0 / (1.0 + np.exp(-lin))
        onu = 1.0 / (1.0 + np.exp(lin))
    lnu = np.log(np.maximum(nu, _NU_EPS))
    lo = np.log(np.maximum(onu, _NU_EPS))
    before = np.cumsum(lo, axis=-1) - lo
    return np.concatenate([lnu + before, lo.sum(axis=-1, keepdims=True)], axis=-1)


# ---------------------------------------------------------------------------
# Sequential Beta-Binomial terms of the GDM, summed over rows
# ---------------------------------------------------------------------------


@njit(cache=True)
def betabin_loglik_sums_jit(z, y, k, nu, onu, phi, d_from, full):
    T, S, D = nu.shape
    out = np.zeros((S, D))
    for s in range(S):
        for t in range(T):
            n = float(y[t, s])
            kk = k[t, s]
            for d in range(kk):
                zz = float(z[t, s, d])
                if d >= d_from:
                    ph = phi[s, d]
                    a = nu[t, s, d] * ph
                    b = onu[t, s, d] * ph
                    term = (
                        math.lgamma(zz + a)
                        + math.lgamma(n - zz + b)
                        - math.lgamma(n + ph)
                        - math.lgamma(a)
                        - math.lgamma(b)
                        + math.lgamma(ph)
                    )
                    if full:
                        term += math.lgamma(n + 1.0) - math.lgamma(zz + 1.0) - math.lgamma(n - zz + 1.0)
                    out[s, d] += term
                n -= zz
    return out


def betabin_loglik_sums_np(z, y, k, nu, onu, phi, d_from, full):
    T, S, D = nu.shape
    zf = z[:, :, :D].astype(np.float64)
    before = np.cumsum(zf, axis=2) - zf
    n = y[:, :, None].astype(np.float64) - before
    d_idx = np.arange(D)[None, None, :]
    active = (d_idx < k[:, :, None]) & (d_idx >= d_from)
    ph = np.broadcast_to(phi[None, :, :], nu.shape)
    a = nu * ph
    b = onu * ph
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = (
            gammaln(zf + a)
            + gammaln(n - zf + b)
            - gammaln(n + ph)
            - gammaln(a)
            - gammaln(b)
            + gammaln(ph)
        )
        if full:
            terms = terms + gammaln(n + 1.0) - gammaln(zf + 1.0) - gammaln(n - zf + 1.0)
    return np.where(active, terms, 0.0).sum(axis=0)


# ---------------------------------------------------------------------------
# Discrete full conditional of a latent total
# ---------------------------------------------------------------------------


@njit(cache=True)
def _latent_row_jit(floor, log_lam, theta, k, z, nu, onu, phi, x_cap, logit_pi, cap0, buf):
    """Unnormalised log weights over y = floor, floor+1, ... written into ``buf``.

    Uses the one-step ratio of consecutive weights, so only logs are needed.
    Returns ``(buf, length)``; ``buf`` may have been reallocated.
    """
    binom = x_cap >= 0
    lam = math.exp(log_lam)
    log_q = log_lam - math.log(theta + lam)
    n = np.empty(k)
    acc = float(floor)
    for d in range(k):
        n[d] = acc
        acc -= z[d]
    lw = 0.0
    lw_max = 0.0
    length = 0
    y = floor
    while True:
        if length >= buf.shape[0]:
            new = np.empty(buf.shape[0] * 2)
            new[: buf.shape[0]] = buf
            buf = new
        buf[length] = lw
        length += 1
        if lw > lw_max:
            lw_max = lw
        if binom and y >= x_cap:
            break
        if y >= cap0 and lw < lw_max + _TAIL_LOG:
            break
        if y - floor >= _HARD_SPAN:
            break
        # log w(y+1) - log w(y)
        yf = float(y)
        if binom:
            step = math.log((x_cap - yf) / (yf + 1.0)) + logit_pi
        else:
            step = math.log((yf + theta) / (yf + 1.0)) + log_q
        for d in range(k):
            nd = n[d]
            zd = z[d]
            ph = phi[d]
            b = onu[d] * ph
            step += math.log((nd + 1.0) / (nd + 1.0 - zd)) + math.log((nd - zd + b) / (nd + ph))
            n[d] = nd + 1.0
        lw += step
        y += 1
    return buf, length


@njit(cache=True)
def sample_latent_rows_jit(floor, log_lam, theta, k, z, nu, onu, phi, x_cap, logit_pi, cap0, u):
    R = floor.shape[0]
    out = np.empty(R, dtype=np.int64)
    buf = np.empty(256)
    for r in range(R):
        buf, length = _latent_row_jit(
            floor[r], log_lam[r], theta[r], k[r], z[r], nu[r], onu[r], phi[r],
            x_cap[r], logit_pi[r], cap0[r], buf,
        )
        m = buf[0]
        for i in range(length):
            if buf[i] > m:
                m = buf[i]
        total = 0.0
        for i in range(length):
            total += math.exp(buf[i] - m)
        target = u[r] * total
        cum = 0.0
        pick = length - 1
        for i in range(length):
            cum += math.exp(buf[i] - m)
            if cum >= target:
                pick = i
                break
        out[r] = floor[r] + pick
    return out


def _latent_logw_np(floor, log_lam, theta, k, z, onu, phi, x_cap, logit_pi, length):
    """Direct (gammaln) log weights on a padded support of ``length`` values."""
    R = floor.shape[0]
    D = z.shape[1] if z.ndim == 2 else 0
    y = floor[:, None] + np.arange(length)[None, :]
    yf = y.astype(np.float64)
    lw = np.empty((R, length))
    binom = x_cap >= 0
    th = theta[:, None]
    lam = np.exp(log_lam)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        nb = gammaln(yf + th) - gammaln(yf + 1.0) + yf * (log_lam[:, None] - np.log(th + lam))
        xc = x_cap[:, None].astype(np.float64)
        bn = gammaln(xc + 1.0) - gammaln(yf + 1.0) - gammaln(xc - yf + 1.0) + yf * logit_pi[:, None]
        bn = np.where(yf <= xc, bn, -np.inf)
    lw[:] = np.where(binom[:, None], bn, nb)
    before = 0.0
    for d in range(D):
        active = (d < k)[:, None]
        zd = z[:, d][:, None].astype(np.float64)
        n = yf - before
        ph = phi[:, d][:, None]
        b = onu[:, d][:, None] * ph
        with np.errstate(invalid="ignore", divide="ignore"):
            term = gammaln(n + 1.0) - gammaln(n - zd + 1.0) + gammaln(n - zd + b) - gammaln(n + ph)
        lw += np.where(active, term, 0.0)
        before = before + np.where(active, zd, 0.0)
    return lw


def sample_latent_rows_np(floor, log_lam, theta, k, z, nu, onu, phi, x_cap, logit_pi, cap0, u):
    floor = np.asarray(floor, dtype=np.int64)
    R = floor.shape[0]
    if R == 0:
        return np.empty(0, dtype=np.int64)
    length = int(max(np.max(cap0 - floor), 0)) + 2
    while True:
        lw = _latent_logw_np(floor, log_lam, theta, k, z, onu, phi, x_cap, logit_pi, length)
        top = np.max(lw, axis=1)
        tail_ok = (lw[:, -1] < top + _TAIL_LOG) | ((x_cap >= 0) & (floor + length - 1 >= x_cap))
        if np.all(tail_ok) or length > _HARD_SPAN:
            break
        length *= 2
    w = np.exp(lw - top[:, None])
    cum = np.cumsum(w, axis=1)
    target = u * cum[:, -1]
    pick = np.argmax(cum >= target[:, None], axis=1)
    return floor + pick


def latent_row_logweights(floor, log_lam, theta, k, z, onu, phi, x_cap=-1, logit_pi=0.0, length=None):
    """Normalised log pmf of one latent total over ``floor, floor+1, ...``.

    Numpy route only; intended for diagnostics and tests.
    """
    one = lambda v, dt=np.float64: np.atleast_1d(np.asarray(v, dtype=dt))
    z2 = np.atleast_2d(np.asarray(z, dtype=np.int64))
    onu2 = np.atleast_2d(np.asarray(onu, dtype=np.float64))
    phi2 = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if length is None:
        length = 64
        while True:
            lw = _latent_logw_np(one(floor, np.int64), one(log_lam), one(theta), one(k, np.int64), z2, onu2,
                                 phi2, one(x_cap, np.int64), one(logit_pi), length)[0]
            if lw[-1] < lw.max() + _TAIL_LOG - 5.0 or (x_cap >= 0 and floor + length - 1 >= x_cap):
                break
            length *= 2
    else:
        lw = _latent_logw_np(one(floor, np.int64), one(log_lam), one(theta), one(k, np.int64), z2, onu2,
                             phi2, one(x_cap, np.int64), one(logit_pi), length)[0]
    lw = lw - np.logaddexp.reduce(lw[np.isfinite(lw)])
    return lw


if HAS_NUMBA and USE_NUMBA:
    BACKEND = "numba"
    delay_loglik = delay_loglik_jit
    nb_region_loglik = nb_region_loglik_jit
    nb_loglik_rows = nb_loglik_rows_jit
    nb_mean_loglik_rows = nb_mean_loglik_rows_jit
    cell_log_means = cell_log_means_jit
    betabin_loglik_sums = betabin_loglik_sums_jit
    sample_latent_rows = sample_latent_rows_jit
else:
    BACKEND = "numpy"
    delay_loglik = delay_loglik_np
    nb_region_loglik = nb_region_loglik_np
    nb_loglik_rows = nb_loglik_rows_np
    nb_mean_loglik_rows = nb_mean_loglik_rows_np
    cell_log_means = cell_log_means_np
    betabin_loglik_sums = betabin_loglik_sums_np
    sample_latent_rows = sample_latent_rows_np
