"""One Metropolis-within-Gibbs sweep of the joint model.

A sweep updates, in order: regional spline blocks (multivariate random walk,
one block per term and region), overall spline coefficients (conjugate Gibbs
or random walk), a joint shift of overall and regional coefficients that
leaves the regional deviations unchanged, penalty sds, a joint rescaling
of each regional penalty sd and its deviations, intercepts, NB dispersions, the delay curve,
Beta-Binomial dispersions and finally the latent totals. Regions are
conditionally independent inside every step, so the numpy route updates all
regions at once while the compiled route loops over them; both read the same
random numbers from the same positions, so given equal buffers they walk the
same chain up to floating point round-off.

Random numbers are drawn outside (from the chain's own ``Generator``) and
passed in as flat buffers laid out by :class:`Layout`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import log_ndtr

from .._compat import USE_NUMBA, njit
from ..kernels import (
    _latent_row_jit,
    delay_loglik_np,
    delay_region_jit,
    lgamma_ratio,
    log_ndtr_scalar,
    nb_region_loglik_np,
    sample_latent_rows_np,
)

LINK_CODES = {"survivor_probit": 0, "hazard_logit": 1}
_NU_EPS = 1e-12

# hyper array positions
H_THETA_A, H_THETA_B, H_PHI_A, H_PHI_B, H_SIGMA, H_IOTA_SD, H_PSI_SD, H_TGT_S, H_TGT_B, H_THETA_FIXED = range(10)


@dataclass(frozen=True)
class Layout:
    """Offsets into the per-sweep normal and uniform buffers."""

    nt: int
    S: int
    Kmax: int
    nb: int
    n_lat: int

    @property
    def normal_offsets(self):
        nt, S, K, nb = self.nt, self.S, self.Kmax, self.nb
        o_blk = 0
        o_ov = o_blk + nt * S * K
        o_sr = o_ov + nt * K
        o_so = o_sr + nt * S
        o_iota = o_so + nt
        o_theta = o_iota + S
        o_psi = o_theta + S
        o_phi = o_psi + S * nb
        o_sh = o_phi + S * nb
        o_sc = o_sh + nt * K
        return o_blk, o_ov, o_sr, o_so, o_iota, o_theta, o_psi, o_phi, o_sh, o_sc, o_sc + nt * S

    @property
    def uniform_offsets(self):
        nt, S, nb = self.nt, self.S, self.nb
        u_blk = 0
        u_ov = u_blk + nt * S
        u_sr = u_ov + nt
        u_so = u_sr + nt * S
        u_iota = u_so + nt
        u_theta = u_iota + S
        u_psi = u_theta + S
        u_phi = u_psi + S * nb
        u_lat = u_phi + S * nb
        u_sh = u_lat + self.n_lat
        u_sc = u_sh + nt
        return u_blk, u_ov, u_sr, u_so, u_iota, u_theta, u_psi, u_phi, u_lat, u_sh, u_sc, u_sc + nt * S

    @property
    def n_normals(self) -> int:
        return self.normal_offsets[-1]

    @property
    def n_uniforms(self) -> int:
        return self.uniform_offsets[-1]


@dataclass
class SweepState:
    """Flat arrays the sweep reads and mutates. Field order is the kernel argument order."""

    # data
    z: np.ndarray          # (T, S, D) int64, visible counts plus imputed lost cells
    k: np.ndarray          # (T, S) int64
    y: np.ndarray          # (T, S) int64, observed or latent totals
    x: np.ndarray          # (T, S) int64, true counts (under-reporting) else copy of y
    latent_t: np.ndarray   # (R,) int64
    latent_s: np.ndarray   # (R,) int64
    floor: np.ndarray      # (T, S) int64
    logit_pi: np.ndarray   # (S,)
    ur: bool
    # design
    X: np.ndarray          # (T, Ktot)
    tstart: np.ndarray     # (nt,) int64
    tdim: np.ndarray       # (nt,) int64
    ttarget: np.ndarray    # (nt,) int64, 0 = mean model, 1 = delay model
    P: np.ndarray          # (nt, Kmax, Kmax)
    PLiT: np.ndarray       # (nt, Kmax, Kmax), inv(chol(P)).T
    # parameters
    iota: np.ndarray
    beta: np.ndarray       # (S, Ktot)
    beta_o: np.ndarray     # (Ktot,)
    sig_r: np.ndarray      # (nt, S)
    sig_o: np.ndarray      # (nt,)
    psi: np.ndarray        # (S, nb)
    theta: np.ndarray      # (S,)
    phi: np.ndarray        # (S, nb)
    # caches
    eta: np.ndarray        # (T, S)
    goff: np.ndarray       # (T, S)
    nbll: np.ndarray       # (S,)
    dll: np.ndarray        # (S, nb)
    dnorm: np.ndarray      # (S, nb)
    # adaptation: log proposal scales
    ls_blk: np.ndarray     # (nt, S)
    blkL: np.ndarray       # (nt, S, Kmax, Kmax)
    ls_ov: np.ndarray      # (nt,)
    ls_iota: np.ndarray
    ls_psi: np.ndarray
    ls_theta: np.ndarray
    ls_phi: np.ndarray
    ls_sr: np.ndarray
    ls_so: np.ndarray
    ls_sh: np.ndarray      # (nt,), joint overall-plus-regional shift
    ls_sc: np.ndarray      # (nt, S), joint penalty-sd-plus-deviation rescaling
    # acceptance counts
    acc_blk: np.ndarray
    acc_ov: np.ndarray
    acc_iota: np.ndarray
    acc_psi: np.ndarray
    acc_theta: np.ndarray
    acc_phi: np.ndarray
    acc_sr: np.ndarray
    acc_so: np.ndarray
    acc_sh: np.ndarray
    acc_sc: np.ndarray
    # settings
    hyper: np.ndarray
    link: int
    nested: bool
    conj: bool

    @property
    def layout(self) -> Layout:
        return Layout(len(self.tstart), self.iota.shape[0], self.P.shape[1], self.psi.shape[1], len(self.latent_t))

    def count(self) -> np.ndarray:
        return self.x if self.ur else self.y

    def args(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def copy(self) -> SweepState:
        vals = {}
        for f in fields(self):
            v = getattr(self, f.name)
            vals[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return SweepState(**vals)


SCALE_FIELDS = ("ls_blk", "ls_ov", "ls_iota", "ls_psi", "ls_theta", "ls_phi", "ls_sr", "ls_so", "ls_sh", "ls_sc")
ACC_FIELDS = ("acc_blk", "acc_ov", "acc_iota", "acc_psi", "acc_theta", "acc_phi", "acc_sr", "acc_so", "acc_sh", "acc_sc")


# ---------------------------------------------------------------------------
# compiled route
# ---------------------------------------------------------------------------


@njit(cache=True)
def _quad(P, j, v, kd):
    q = 0.0
    for a in range(kd):
        row = 0.0
        for b in range(kd):
            row += P[j, a, b] * v[b]
        q += v[a] * row
    return q


@njit(cache=True)
def _nb_col(count, s, eta, theta_s):
    T = count.shape[0]
    acc = 0.0
    c_th = theta_s * math.log(theta_s)
    for t in range(T):
        c = count[t, s]
        e = eta[t, s]
        acc += lgamma_ratio(theta_s, c) + c_th + c * e - (c + theta_s) * math.log(theta_s + math.exp(e))
    return acc


@njit(cache=True)
def _delay_sum(s, z, y, k, goff, psi_row, phi_row, link, d_lo, d_hi, tmp):
    for d in range(tmp.shape[0]):
        tmp[d] = 0.0
    delay_region_jit(s, z, y, k, goff, psi_row, phi_row, link, d_lo, d_hi, tmp, tmp, False)


@njit(cache=True)
def _refresh_jit(z, k, y, x, ur, eta, goff, psi, phi, theta, nbll, dll, dnorm, link):
    S, nb = psi.shape
    count = x if ur else y
    for s in range(S):
        nbll[s] = _nb_col(count, s, eta, theta[s])
        for d in range(nb):
            dll[s, d] = 0.0
            dnorm[s, d] = 0.0
        delay_region_jit(s, z, y, k, goff, psi[s], phi[s], link, 0, nb, dll[s], dnorm[s], True)


@njit(cache=True)
def _accept(logu, delta):
    return logu < delta


@njit(cache=True)
def _prob(delta):
    return 1.0 if delta >= 0.0 else math.exp(delta)


@njit(cache=True)
def sweep_jit(
    z, k, y, x, latent_t, latent_s, floor, logit_pi, ur,
    X, tstart, tdim, ttarget, P, PLiT,
    iota, beta, beta_o, sig_r, sig_o, psi, theta, phi,
    eta, goff, nbll, dll, dnorm,
    ls_blk, blkL, ls_ov, ls_iota, ls_psi, ls_theta, ls_phi, ls_sr, ls_so, ls_sh, ls_sc,
    acc_blk, acc_ov, acc_iota, acc_psi, acc_theta, acc_phi, acc_sr, acc_so, acc_sh, acc_sc,
    hyper, link, nested, conj,
    normals, uniforms, gamma,
):
    T, S = y.shape
    nt = tstart.shape[0]
    Kmax = P.shape[1]
    nb = psi.shape[1]
    count = x if ur else y
    tgt_s = hyper[H_TGT_S]
    tgt_b = hyper[H_TGT_B]

    o_blk = 0
    o_ov = o_blk + nt * S * Kmax
    o_sr = o_ov + nt * Kmax
    o_so = o_sr + nt * S
    o_iota = o_so + nt
    o_theta = o_iota + S
    o_psi = o_theta + S
    o_phi = o_psi + S * nb
    u_blk = 0
    u_ov = u_blk + nt * S
    u_sr = u_ov + nt
    u_so = u_sr + nt * S
    u_iota = u_so + nt
    u_theta = u_iota + S
    u_psi = u_theta + S
    u_phi = u_psi + S * nb
    u_lat = u_phi + S * nb
    o_sh = o_phi + S * nb
    u_sh = u_lat + latent_t.shape[0]
    o_sc = o_sh + nt * Kmax
    u_sc = u_sh + nt

    delta = np.empty(Kmax)
    diff_new = np.empty(Kmax)
    diff_old = np.empty(Kmax)
    col_old = np.empty(T)
    tmp = np.zeros(max(nb, 1))
    tmp2 = np.zeros(max(nb, 1))
    row = np.empty(max(nb, 1))
    sh_ll = np.empty(S)
    sh_dll = np.empty((S, max(nb, 1)))
    sh_old = np.empty((T, S))

    # 1. regional spline blocks
    for j in range(nt):
        kd = tdim[j]
        off = tstart[j]
        for s in range(S):
            base = o_blk + (j * S + s) * Kmax
            step = math.exp(ls_blk[j, s])
            for a in range(kd):
                acc = 0.0
                for b in range(a + 1):
                    acc += blkL[j, s, a, b] * normals[base + b]
                delta[a] = step * acc
            sig2 = sig_r[j, s] * sig_r[j, s]
            for a in range(kd):
                m = beta_o[off + a] if nested else 0.0
                diff_old[a] = beta[s, off + a] - m
                diff_new[a] = diff_old[a] + delta[a]
            dprior = -(_quad(P, j, diff_new, kd) - _quad(P, j, diff_old, kd)) / (2.0 * sig2)
            target = eta if ttarget[j] == 0 else goff
            new_ll = 0.0
            for t in range(T):
                col_old[t] = target[t, s]
                acc = 0.0
                for a in range(kd):
                    acc += X[t, off + a] * delta[a]
                target[t, s] += acc
            if ttarget[j] == 0:
                new_ll = _nb_col(count, s, eta, theta[s])
                dl = new_ll - nbll[s]
            else:
                _delay_sum(s, z, y, k, goff, psi[s], phi[s], link, 0, nb, tmp)
                dl = 0.0
                for d in range(nb):
                    dl += tmp[d] - dll[s, d]
            dtot = dl + dprior
            if _accept(math.log(uniforms[u_blk + j * S + s]), dtot):
                for a in range(kd):
                    beta[s, off + a] += delta[a]
                if ttarget[j] == 0:
                    nbll[s] = new_ll
                else:
                    for d in range(nb):
                        dll[s, d] = tmp[d]
                acc_blk[j, s] += 1
            else:
                for t in range(T):
                    target[t, s] = col_old[t]
            if gamma > 0.0:
                ls_blk[j, s] += gamma * (_prob(dtot) - tgt_b)

    # 2. overall coefficients
    if nested:
        for j in range(nt):
            kd = tdim[j]
            off = tstart[j]
            c = 1.0 / (sig_o[j] * sig_o[j])
            for s in range(S):
                c += 1.0 / (sig_r[j, s] * sig_r[j, s])
            rc = 1.0 / math.sqrt(c)
            base = o_ov + j * Kmax
            if conj:
                for a in range(kd):
                    m = 0.0
                    for s in range(S):
                        m += beta[s, off + a] / (sig_r[j, s] * sig_r[j, s])
                    m /= c
                    acc = 0.0
                    for b in range(kd):
                        acc += PLiT[j, a, b] * normals[base + b]
                    beta_o[off + a] = m + rc * acc
            else:
                step = math.exp(ls_ov[j]) * rc
                for a in range(kd):
                    acc = 0.0
                    for b in range(kd):
                        acc += PLiT[j, a, b] * normals[base + b]
                    delta[a] = step * acc
                for a in range(kd):
                    diff_old[a] = beta_o[off + a]
                    diff_new[a] = beta_o[off + a] + delta[a]
                so2 = sig_o[j] * sig_o[j]
                dtot = -(_quad(P, j, diff_new, kd) - _quad(P, j, diff_old, kd)) / (2.0 * so2)
                for s in range(S):
                    for a in range(kd):
                        diff_old[a] = beta[s, off + a] - beta_o[off + a]
                        diff_new[a] = diff_old[a] - delta[a]
                    dtot -= (_quad(P, j, diff_new, kd) - _quad(P, j, diff_old, kd)) / (2.0 * sig_r[j, s] ** 2)
                if _accept(math.log(uniforms[u_ov + j]), dtot):
                    for a in range(kd):
                        beta_o[off + a] += delta[a]
                    acc_ov[j] += 1
                if gamma > 0.0:
                    ls_ov[j] += gamma * (_prob(dtot) - tgt_b)

    # 2b. joint shift of overall and regional coefficients (deviations fixed)
    if nested:
        for j in range(nt):
            kd = tdim[j]
            off = tstart[j]
            base = o_sh + j * Kmax
            step = math.exp(ls_sh[j]) / S
            for a in range(kd):
                acc = 0.0
                for s in range(S):
                    for b in range(a + 1):
                        acc += blkL[j, s, a, b] * normals[base + b]
                delta[a] = step * acc
            for a in range(kd):
                diff_old[a] = beta_o[off + a]
                diff_new[a] = beta_o[off + a] + delta[a]
            dtot = -(_quad(P, j, diff_new, kd) - _quad(P, j, diff_old, kd)) / (2.0 * sig_o[j] * sig_o[j])
            target = eta if ttarget[j] == 0 else goff
            for t in range(T):
                acc = 0.0
                for a in range(kd):
                    acc += X[t, off + a] * delta[a]
                for s in range(S):
                    sh_old[t, s] = target[t, s]
                    target[t, s] += acc
            for s in range(S):
                if ttarget[j] == 0:
                    sh_ll[s] = _nb_col(count, s, eta, theta[s])
                    dtot += sh_ll[s] - nbll[s]
                else:
                    _delay_sum(s, z, y, k, goff, psi[s], phi[s], link, 0, nb, tmp)
                    for d in range(nb):
                        sh_dll[s, d] = tmp[d]
                        dtot += tmp[d] - dll[s, d]
            if _accept(math.log(uniforms[u_sh + j]), dtot):
                for a in range(kd):
                    beta_o[off + a] += delta[a]
                    for s in range(S):
                        beta[s, off + a] += delta[a]
                for s in range(S):
                    if ttarget[j] == 0:
                        nbll[s] = sh_ll[s]
                    else:
                        for d in range(nb):
                            dll[s, d] = sh_dll[s, d]
                acc_sh[j] += 1
            else:
                for t in range(T):
                    for s in range(S):
                        target[t, s] = sh_old[t, s]
            if gamma > 0.0:
                ls_sh[j] += gamma * (_prob(dtot) - tgt_b)

    # 3. penalty standard deviations (log scale, half-normal prior)
    scale2 = hyper[H_SIGMA] * hyper[H_SIGMA]
    for j in range(nt):
        kd = tdim[j]
        off = tstart[j]
        for s in range(S):
            for a in range(kd):
                diff_old[a] = beta[s, off + a] - (beta_o[off + a] if nested else 0.0)
            q = _quad(P, j, diff_old, kd)
            cur = math.log(sig_r[j, s])
            new = cur + math.exp(ls_sr[j, s]) * normals[o_sr + j * S + s]
            sc, sn = math.exp(cur), math.exp(new)
            dtot = (-(sn * sn - sc * sc) / (2.0 * scale2) + (1.0 - kd) * (new - cur)
                    - q / (2.0 * sn * sn) + q / (2.0 * sc * sc))
            if _accept(math.log(uniforms[u_sr + j * S + s]), dtot):
                sig_r[j, s] = sn
                acc_sr[j, s] += 1
            if gamma > 0.0:
                ls_sr[j, s] += gamma * (_prob(dtot) - tgt_s)
        if nested:
            for a in range(kd):
                diff_old[a] = beta_o[off + a]
            q = _quad(P, j, diff_old, kd)
            cur = math.log(sig_o[j])
            new = cur + math.exp(ls_so[j]) * normals[o_so + j]
            sc, sn = math.exp(cur), math.exp(new)
            dtot = (-(sn * sn - sc * sc) / (2.0 * scale2) + (1.0 - kd) * (new - cur)
                    - q / (2.0 * sn * sn) + q / (2.0 * sc * sc))
            if _accept(math.log(uniforms[u_so + j]), dtot):
                sig_o[j] = sn
                acc_so[j] += 1
            if gamma > 0.0:
                ls_so[j] += gamma * (_prob(dtot) - tgt_s)

    # 3b. rescale each regional sd together with its deviations; the
    # deviation prior is invariant and its normaliser cancels the Jacobian
    for j in range(nt):
        kd = tdim[j]
        off = tstart[j]
        target = eta if ttarget[j] == 0 else goff
        for s in range(S):
            u = math.exp(ls_sc[j, s]) * normals[o_sc + j * S + s]
            sc = sig_r[j, s]
            sn = sc * math.exp(u)
            f = math.exp(u) - 1.0
            for a in range(kd):
                delta[a] = f * (beta[s, off + a] - (beta_o[off + a] if nested else 0.0))
            for t in range(T):
                col_old[t] = target[t, s]
                acc = 0.0
                for a in range(kd):
                    acc += X[t, off + a] * delta[a]
                target[t, s] += acc
            if ttarget[j] == 0:
                new_ll = _nb_col(count, s, eta, theta[s])
                dl = new_ll - nbll[s]
            else:
                _delay_sum(s, z, y, k, goff, psi[s], phi[s], link, 0, nb, tmp)
                dl = 0.0
                for d in range(nb):
                    dl += tmp[d] - dll[s, d]
            dtot = dl - (sn * sn - sc * sc) / (2.0 * scale2) + u
            if _accept(math.log(uniforms[u_sc + j * S + s]), dtot):
                for a in range(kd):
                    beta[s, off + a] += delta[a]
                sig_r[j, s] = sn
                if ttarget[j] == 0:
                    nbll[s] = new_ll
                else:
                    for d in range(nb):
                        dll[s, d] = tmp[d]
                acc_sc[j, s] += 1
            else:
                for t in range(T):
                    target[t, s] = col_old[t]
            if gamma > 0.0:
                ls_sc[j, s] += gamma * (_prob(dtot) - tgt_s)

    # 4. intercepts
    isd2 = hyper[H_IOTA_SD] * hyper[H_IOTA_SD]
    for s in range(S):
        step = math.exp(ls_iota[s]) * normals[o_iota + s]
        for t in range(T):
            eta[t, s] += step
        new_ll = _nb_col(count, s, eta, theta[s])
        new_i = iota[s] + step
        dtot = new_ll - nbll[s] - (new_i * new_i - iota[s] * iota[s]) / (2.0 * isd2)
        if _accept(math.log(uniforms[u_iota + s]), dtot):
            iota[s] = new_i
            nbll[s] = new_ll
            acc_iota[s] += 1
        else:
            for t in range(T):
                eta[t, s] -= step
        if gamma > 0.0:
            ls_iota[s] += gamma * (_prob(dtot) - tgt_s)

    # 5. NB dispersions
    if hyper[H_THETA_FIXED] <= 0.0:
        ta, tb = hyper[H_THETA_A], hyper[H_THETA_B]
        for s in range(S):
            cur = math.log(theta[s])
            new = cur + math.exp(ls_theta[s]) * normals[o_theta + s]
            tn = math.exp(new)
            new_ll = _nb_col(count, s, eta, tn)
            dtot = new_ll - nbll[s] + ta * (new - cur) - tb * (tn - theta[s])
            if _accept(math.log(uniforms[u_theta + s]), dtot):
                theta[s] = tn
                nbll[s] = new_ll
                acc_theta[s] += 1
            if gamma > 0.0:
                ls_theta[s] += gamma * (_prob(dtot) - tgt_s)

    # 6. delay curve
    psd2 = hyper[H_PSI_SD] * hyper[H_PSI_SD]
    for s in range(S):
        for d in range(nb):
            e = math.exp(ls_psi[s, d]) * normals[o_psi + s * nb + d]
            for c in range(nb):
                row[c] = psi[s, c]
            if link == 0:
                if d == 0:
                    for c in range(nb):
                        row[c] += e
                    dprior = -(row[0] * row[0] - psi[s, 0] * psi[s, 0]) / (2.0 * psd2)
                else:
                    inc = psi[s, d] - psi[s, d - 1]
                    u_old = math.log(inc)
                    inc_new = math.exp(u_old + e)
                    for c in range(d, nb):
                        row[c] += inc_new - inc
                    dprior = -(inc_new * inc_new - inc * inc) / (2.0 * psd2) + e
                d_hi = nb
            else:
                row[d] += e
                prev_new = row[d] - (row[d - 1] if d > 0 else 0.0)
                prev_old = psi[s, d] - (psi[s, d - 1] if d > 0 else 0.0)
                dprior = -(prev_new * prev_new - prev_old * prev_old) / (2.0 * psd2)
                if d + 1 < nb:
                    nxt_new = psi[s, d + 1] - row[d]
                    nxt_old = psi[s, d + 1] - psi[s, d]
                    dprior -= (nxt_new * nxt_new - nxt_old * nxt_old) / (2.0 * psd2)
                d_hi = d + 1
            _delay_sum(s, z, y, k, goff, row, phi[s], link, d, d_hi, tmp)
            dl = 0.0
            for c in range(d, d_hi):
                dl += tmp[c] - dll[s, c]
            dtot = dl + dprior
            if _accept(math.log(uniforms[u_psi + s * nb + d]), dtot):
                for c in range(nb):
                    psi[s, c] = row[c]
                for c in range(d, d_hi):
                    dll[s, c] = tmp[c]
                acc_psi[s, d] += 1
            if gamma > 0.0:
                ls_psi[s, d] += gamma * (_prob(dtot) - tgt_s)

    # 7. Beta-Binomial dispersions
    pa, pb = hyper[H_PHI_A], hyper[H_PHI_B]
    for s in range(S):
        for d in range(nb):
            cur = math.log(phi[s, d])
            new = cur + math.exp(ls_phi[s, d]) * normals[o_phi + s * nb + d]
            pn = math.exp(new)
            for c in range(nb):
                row[c] = phi[s, c]
            row[d] = pn
            tmp[d] = 0.0
            tmp2[d] = 0.0
            delay_region_jit(s, z, y, k, goff, psi[s], row, link, d, d + 1, tmp, tmp2, True)
            dtot = tmp[d] + tmp2[d] - dll[s, d] - dnorm[s, d] + pa * (new - cur) - pb * (pn - phi[s, d])
            if _accept(math.log(uniforms[u_phi + s * nb + d]), dtot):
                phi[s, d] = pn
                dll[s, d] = tmp[d]
                dnorm[s, d] = tmp2[d]
                acc_phi[s, d] += 1
            if gamma > 0.0:
                ls_phi[s, d] += gamma * (_prob(dtot) - tgt_s)

    # 8. latent totals
    buf = np.empty(256)
    onu = np.empty(max(nb, 1))
    for r in range(latent_t.shape[0]):
        t = latent_t[r]
        s = latent_s[r]
        kk = k[t, s]
        g = goff[t, s]
        prev = 0.0
        qk = 0.0
        for d in range(kk):
            xv = psi[s, d] + g
            if link == 0:
                lq = log_ndtr_scalar(-xv)
                lo = lq - prev
                prev = lq
            else:
                lo = -math.log1p(math.exp(xv))
            o = math.exp(lo)
            onu[d] = o if o > _NU_EPS else _NU_EPS
            qk += lo
        lam = math.exp(eta[t, s])
        mrem = lam * math.exp(qk)
        cap0 = floor[t, s] + int(mrem + 6.0 * math.sqrt(mrem + mrem * mrem / theta[s])) + 2
        xcap = x[t, s] if ur else -1
        buf, length = _latent_row_jit(floor[t, s], eta[t, s], theta[s], kk, z[t, s], onu, onu, phi[s],
                                      xcap, logit_pi[s], cap0, buf)
        m = buf[0]
        for i in range(length):
            if buf[i] > m:
                m = buf[i]
        total = 0.0
        for i in range(length):
            total += math.exp(buf[i] - m)
        goal = uniforms[u_lat + r] * total
        cum = 0.0
        pick = length - 1
        for i in range(length):
            cum += math.exp(buf[i] - m)
            if cum >= goal:
                pick = i
                break
        y[t, s] = floor[t, s] + pick

    _refresh_jit(z, k, y, x, ur, eta, goff, psi, phi, theta, nbll, dll, dnorm, link)


# ---------------------------------------------------------------------------
# numpy route
# ---------------------------------------------------------------------------


def _quad_np(Pj, V):
    """Row-wise quadratic forms ``v P v`` for the rows of ``V``."""
    return np.einsum("si,ij,sj->s", V, Pj, V)


def _prob_np(delta):
    return np.exp(np.minimum(delta, 0.0))


def refresh_np(st: SweepState) -> None:
    st.nbll[:] = nb_region_loglik_np(st.count(), st.eta, st.theta)
    ll, norm = delay_loglik_np(st.z, st.y, st.k, st.goff, st.psi, st.phi, st.link, 0, True)
    st.dll[:] = ll
    st.dnorm[:] = norm


def sweep_np(st: SweepState, normals: np.ndarray, uniforms: np.ndarray, gamma: float) -> None:
    T, S = st.y.shape
    lay = st.layout
    nt, Kmax, nb = lay.nt, lay.Kmax, lay.nb
    o_blk, o_ov, o_sr, o_so, o_iota, o_theta, o_psi, o_phi, o_sh, o_sc, _ = lay.normal_offsets
    u_blk, u_ov, u_sr, u_so, u_iota, u_theta, u_psi, u_phi, u_lat, u_sh, u_sc, _ = lay.uniform_offsets
    tgt_s, tgt_b = st.hyper[H_TGT_S], st.hyper[H_TGT_B]
    count = st.count()
    adapt = gamma > 0.0

    # 1. regional spline blocks
    for j in range(nt):
        kd, off = int(st.tdim[j]), int(st.tstart[j])
        sl = slice(off, off + kd)
        eps = normals[o_blk + j * S * Kmax: o_blk + (j + 1) * S * Kmax].reshape(S, Kmax)[:, :kd]
        L = st.blkL[j, :, :kd, :kd]
        delta = np.exp(st.ls_blk[j])[:, None] * np.einsum("sab,sb->sa", np.tril(L), eps)
        mean = st.beta_o[sl][None, :] if st.nested else 0.0
        old = st.beta[:, sl] - mean
        dprior = -(_quad_np(st.P[j, :kd, :kd], old + delta) - _quad_np(st.P[j, :kd, :kd], old)) / (2.0 * st.sig_r[j] ** 2)
        dcol = st.X[:, sl] @ delta.T
        if st.ttarget[j] == 0:
            new_eta = st.eta + dcol
            new_ll = nb_region_loglik_np(count, new_eta, st.theta)
            dl = new_ll - st.nbll
        else:
            new_goff = st.goff + dcol
            new_dll, _ = delay_loglik_np(st.z, st.y, st.k, new_goff, st.psi, st.phi, st.link, 0, False)
            dl = (new_dll - st.dll).sum(axis=1)
        dtot = dl + dprior
        ok = np.log(uniforms[u_blk + j * S: u_blk + (j + 1) * S]) < dtot
        st.beta[ok, sl] += delta[ok]
        if st.ttarget[j] == 0:
            st.eta[:, ok] = new_eta[:, ok]
            st.nbll[ok] = new_ll[ok]
        else:
            st.goff[:, ok] = new_goff[:, ok]
            st.dll[ok] = new_dll[ok]
        st.acc_blk[j] += ok
        if adapt:
            st.ls_blk[j] += gamma * (_prob_np(dtot) - tgt_b)

    # 2. overall coefficients
    if st.nested:
        for j in range(nt):
            kd, off = int(st.tdim[j]), int(st.tstart[j])
            sl = slice(off, off + kd)
            w = 1.0 / st.sig_r[j] ** 2
            c = 1.0 / st.sig_o[j] ** 2 + w.sum()
            rc = 1.0 / math.sqrt(c)
            eps = normals[o_ov + j * Kmax: o_ov + j * Kmax + kd]
            noise = st.PLiT[j, :kd, :kd] @ eps
            if st.conj:
                m = (w[:, None] * st.beta[:, sl]).sum(axis=0) / c
                st.beta_o[sl] = m + rc * noise
            else:
                delta = math.exp(st.ls_ov[j]) * rc * noise
                Pj = st.P[j, :kd, :kd]
                old = st.beta_o[sl]
                dtot = -(float(old @ Pj @ old + 2 * delta @ Pj @ old + delta @ Pj @ delta) - float(old @ Pj @ old)) / (2.0 * st.sig_o[j] ** 2)
                r_old = st.beta[:, sl] - old[None, :]
                dtot -= float(np.sum((_quad_np(Pj, r_old - delta) - _quad_np(Pj, r_old)) / (2.0 * st.sig_r[j] ** 2)))
                if math.log(uniforms[u_ov + j]) < dtot:
                    st.beta_o[sl] += delta
                    st.acc_ov[j] += 1
                if adapt:
                    st.ls_ov[j] += gamma * (min(1.0, math.exp(min(dtot, 0.0))) - tgt_b)

    # 2b. joint shift of overall and regional coefficients
    if st.nested:
        for j in range(nt):
            kd, off = int(st.tdim[j]), int(st.tstart[j])
            sl = slice(off, off + kd)
            eps = normals[o_sh + j * Kmax: o_sh + j * Kmax + kd]
            Lbar = np.tril(st.blkL[j, :, :kd, :kd]).sum(axis=0)
            delta = math.exp(st.ls_sh[j]) / S * (Lbar @ eps)
            Pj = st.P[j, :kd, :kd]
            old = st.beta_o[sl]
            dtot = -(float((old + delta) @ Pj @ (old + delta)) - float(old @ Pj @ old)) / (2.0 * st.sig_o[j] ** 2)
            dcol = (st.X[:, sl] @ delta)[:, None]
            if st.ttarget[j] == 0:
                new_eta = st.eta + dcol
                new_ll = nb_region_loglik_np(count, new_eta, st.theta)
                dtot += float((new_ll - st.nbll).sum())
            else:
                new_goff = st.goff + dcol
                new_dll, _ = delay_loglik_np(st.z, st.y, st.k, new_goff, st.psi, st.phi, st.link, 0, False)
                dtot += float((new_dll - st.dll).sum())
            if math.log(uniforms[u_sh + j]) < dtot:
                st.beta_o[sl] += delta
                st.beta[:, sl] += delta[None, :]
                if st.ttarget[j] == 0:
                    st.eta[:] = new_eta
                    st.nbll[:] = new_ll
                else:
                    st.goff[:] = new_goff
                    st.dll[:] = new_dll
                st.acc_sh[j] += 1
            if adapt:
                st.ls_sh[j] += gamma * (min(1.0, math.exp(min(dtot, 0.0))) - tgt_b)

    # 3. penalty sds
    scale2 = st.hyper[H_SIGMA] ** 2
    for j in range(nt):
        kd, off = int(st.tdim[j]), int(st.tstart[j])
        sl = slice(off, off + kd)
        Pj = st.P[j, :kd, :kd]
        mean = st.beta_o[sl][None, :] if st.nested else 0.0
        q = _quad_np(Pj, st.beta[:, sl] - mean)
        cur = np.log(st.sig_r[j])
        new = cur + np.exp(st.ls_sr[j]) * normals[o_sr + j * S: o_sr + (j + 1) * S]
        sc, sn = np.exp(cur), np.exp(new)
        dtot = -(sn**2 - sc**2) / (2 * scale2) + (1.0 - kd) * (new - cur) - q / (2 * sn**2) + q / (2 * sc**2)
        ok = np.log(uniforms[u_sr + j * S: u_sr + (j + 1) * S]) < dtot
        st.sig_r[j, ok] = sn[ok]
        st.acc_sr[j] += ok
        if adapt:
            st.ls_sr[j] += gamma * (_prob_np(dtot) - tgt_s)
        if st.nested:
            b = st.beta_o[sl]
            q = float(b @ Pj @ b)
            cur = math.log(st.sig_o[j])
            new = cur + math.exp(st.ls_so[j]) * normals[o_so + j]
            sc, sn = math.exp(cur), math.exp(new)
            dtot = -(sn**2 - sc**2) / (2 * scale2) + (1.0 - kd) * (new - cur) - q / (2 * sn**2) + q / (2 * sc**2)
            if math.log(uniforms[u_so + j]) < dtot:
                st.sig_o[j] = sn
                st.acc_so[j] += 1
            if adapt:
                st.ls_so[j] += gamma * (min(1.0, math.exp(min(dtot, 0.0))) - tgt_s)

    # 3b. joint rescaling of regional sds and deviations
    for j in range(nt):
        kd, off = int(st.tdim[j]), int(st.tstart[j])
        sl = slice(off, off + kd)
        u = np.exp(st.ls_sc[j]) * normals[o_sc + j * S: o_sc + (j + 1) * S]
        sc = st.sig_r[j].copy()
        sn = sc * np.exp(u)
        mean = st.beta_o[sl][None, :] if st.nested else 0.0
        delta = (np.exp(u) - 1.0)[:, None] * (st.beta[:, sl] - mean)
        dcol = st.X[:, sl] @ delta.T
        if st.ttarget[j] == 0:
            new_eta = st.eta + dcol
            new_ll = nb_region_loglik_np(count, new_eta, st.theta)
            dl = new_ll - st.nbll
        else:
            new_goff = st.goff + dcol
            new_dll, _ = delay_loglik_np(st.z, st.y, st.k, new_goff, st.psi, st.phi, st.link, 0, False)
            dl = (new_dll - st.dll).sum(axis=1)
        dtot = dl - (sn**2 - sc**2) / (2 * scale2) + u
        ok = np.log(uniforms[u_sc + j * S: u_sc + (j + 1) * S]) < dtot
        st.beta[ok, sl] += delta[ok]
        st.sig_r[j, ok] = sn[ok]
        if st.ttarget[j] == 0:
            st.eta[:, ok] = new_eta[:, ok]
            st.nbll[ok] = new_ll[ok]
        else:
            st.goff[:, ok] = new_goff[:, ok]
            st.dll[ok] = new_dll[ok]
        st.acc_sc[j] += ok
        if adapt:
            st.ls_sc[j] += gamma * (_prob_np(dtot) - tgt_s)

    # 4. intercepts
    isd2 = st.hyper[H_IOTA_SD] ** 2
    step = np.exp(st.ls_iota) * normals[o_iota: o_iota + S]
    new_eta = st.eta + step[None, :]
    new_ll = nb_region_loglik_np(count, new_eta, st.theta)
    new_i = st.iota + step
    dtot = new_ll - st.nbll - (new_i**2 - st.iota**2) / (2 * isd2)
    ok = np.log(uniforms[u_iota: u_iota + S]) < dtot
    st.iota[ok] = new_i[ok]
    st.eta[:, ok] = new_eta[:, ok]
    st.nbll[ok] = new_ll[ok]
    st.acc_iota += ok
    if adapt:
        st.ls_iota += gamma * (_prob_np(dtot) - tgt_s)

    # 5. NB dispersions
    if st.hyper[H_THETA_FIXED] <= 0.0:
        ta, tb = st.hyper[H_THETA_A], st.hyper[H_THETA_B]
        cur = np.log(st.theta)
        new = cur + np.exp(st.ls_theta) * normals[o_theta: o_theta + S]
        tn = np.exp(new)
        new_ll = nb_region_loglik_np(count, st.eta, tn)
        dtot = new_ll - st.nbll + ta * (new - cur) - tb * (tn - st.theta)
        ok = np.log(uniforms[u_theta: u_theta + S]) < dtot
        st.theta[ok] = tn[ok]
        st.nbll[ok] = new_ll[ok]
        st.acc_theta += ok
        if adapt:
            st.ls_theta += gamma * (_prob_np(dtot) - tgt_s)

    # 6. delay curve
    psd2 = st.hyper[H_PSI_SD] ** 2
    eps_all = normals[o_psi: o_psi + S * nb].reshape(S, nb)
    u_all = uniforms[u_psi: u_psi + S * nb].reshape(S, nb)
    for d in range(nb):
        e = np.exp(st.ls_psi[:, d]) * eps_all[:, d]
        row = st.psi.copy()
        if st.link == 0:
            if d == 0:
                row += e[:, None]
                dprior = -(row[:, 0] ** 2 - st.psi[:, 0] ** 2) / (2 * psd2)
            else:
                inc = st.psi[:, d] - st.psi[:, d - 1]
                inc_new = np.exp(np.log(inc) + e)
                row[:, d:] += (inc_new - inc)[:, None]
                dprior = -(inc_new**2 - inc**2) / (2 * psd2) + e
            cols = slice(d, nb)
        else:
            row[:, d] += e
            prev = row[:, d - 1] if d > 0 else 0.0
            prev_old = st.psi[:, d - 1] if d > 0 else 0.0
            dprior = -((row[:, d] - prev) ** 2 - (st.psi[:, d] - prev_old) ** 2) / (2 * psd2)
            if d + 1 < nb:
                dprior -= ((st.psi[:, d + 1] - row[:, d]) ** 2 - (st.psi[:, d + 1] - st.psi[:, d]) ** 2) / (2 * psd2)
            cols = slice(d, d + 1)
        new_dll, _ = delay_loglik_np(st.z, st.y, st.k, st.goff, row, st.phi, st.link, d, False)
        dtot = (new_dll[:, cols] - st.dll[:, cols]).sum(axis=1) + dprior
        ok = np.log(u_all[:, d]) < dtot
        st.psi[ok] = row[ok]
        tmp = st.dll[:, cols].copy()
        tmp[ok] = new_dll[ok, cols]
        st.dll[:, cols] = tmp
        st.acc_psi[:, d] += ok
        if adapt:
            st.ls_psi[:, d] += gamma * (_prob_np(dtot) - tgt_s)

    # 7. Beta-Binomial dispersions
    if nb:
        pa, pb = st.hyper[H_PHI_A], st.hyper[H_PHI_B]
        cur = np.log(st.phi)
        new = cur + np.exp(st.ls_phi) * normals[o_phi: o_phi + S * nb].reshape(S, nb)
        pn = np.exp(new)
        new_dll, new_norm = delay_loglik_np(st.z, st.y, st.k, st.goff, st.psi, pn, st.link, 0, True)
        dtot = new_dll + new_norm - st.dll - st.dnorm + pa * (new - cur) - pb * (pn - st.phi)
        ok = np.log(uniforms[u_phi: u_phi + S * nb].reshape(S, nb)) < dtot
        st.phi[ok] = pn[ok]
        st.dll[ok] = new_dll[ok]
        st.dnorm[ok] = new_norm[ok]
        st.acc_phi += ok
        if adapt:
            st.ls_phi += gamma * (_prob_np(dtot) - tgt_s)

    # 8. latent totals
    R = len(st.latent_t)
    if R:
        t, s = st.latent_t, st.latent_s
        kk = st.k[t, s]
        lin = st.psi[s] + st.goff[t, s][:, None]
        if st.link == 0:
            lq = log_ndtr(-lin)
            prev = np.concatenate([np.zeros((R, 1)), lq[:, :-1]], axis=1)
            lo = lq - prev
        else:
            lo = -np.logaddexp(0.0, lin)
        active = np.arange(nb)[None, :] < kk[:, None]
        onu = np.maximum(np.exp(lo), _NU_EPS)
        qk = np.where(active, lo, 0.0).sum(axis=1)
        mrem = np.exp(st.eta[t, s]) * np.exp(qk)
        th = st.theta[s]
        cap0 = st.floor[t, s] + (mrem + 6.0 * np.sqrt(mrem + mrem**2 / th)).astype(np.int64) + 2
        xcap = st.x[t, s] if st.ur else np.full(R, -1, dtype=np.int64)
        st.y[t, s] = sample_latent_rows_np(
            st.floor[t, s], st.eta[t, s], th, kk, st.z[t, s, :nb], onu, onu, st.phi[s],
            xcap, st.logit_pi[s], cap0, uniforms[u_lat: u_lat + R],
        )
    refresh_np(st)


def refresh(st: SweepState, use_numba: bool = USE_NUMBA) -> None:
    if use_numba:
        _refresh_jit(st.z, st.k, st.y, st.x, st.ur, st.eta, st.goff, st.psi, st.phi, st.theta,
                     st.nbll, st.dll, st.dnorm, st.link)
    else:
        refresh_np(st)


def sweep(st: SweepState, normals: np.ndarray, uniforms: np.ndarray, gamma: float, use_numba: bool = USE_NUMBA) -> None:
    if use_numba:
        sweep_jit(*st.args(), normals, uniforms, gamma)
    else:
        sweep_np(st, normals, uniforms, gamma)
