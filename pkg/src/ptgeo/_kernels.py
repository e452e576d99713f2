"""Compiled inner loops for the sampler's per-iteration bookkeeping.

They mirror :mod:`ptgeo.proposals` and :func:`ptgeo.sampler.swap_step` row by
row; every row is computed independently so results do not depend on how
many chains share a batch.
"""
import numpy as np
from numba import njit

IGRW, AGRW, PCN = 0, 1, 2
KIND_CODES = {"igrw": IGRW, "agrw": AGRW, "pcn": PCN}


@njit(cache=True)
def propose_into(kind, z, eta, xi, lw, chol, offset, scale, zp, theta_p):
    t, d = z.shape
    for k in range(t):
        e = eta[k]
        if kind == PCN:
            c = np.sqrt(1.0 - e * e)
            for i in range(d):
                acc = 0.0
                for j in range(i + 1):
                    acc += lw[i, j] * xi[k, j]
                zp[k, i] = c * z[k, i] + e * acc
        elif kind == AGRW:
            for i in range(d):
                acc = 0.0
                for j in range(i + 1):
                    acc += chol[k, i, j] * xi[k, j]
                zp[k, i] = z[k, i] + e * acc
        else:
            for i in range(d):
                zp[k, i] = z[k, i] + e * xi[k, i]
        for i in range(d):
            theta_p[k, i] = offset[i] + zp[k, i] * scale[i]


@njit(cache=True)
def mh_update(kind, z, zp, ll, llp, lp, lpp, betas, log_u, eta, accept_count,
              n, gain, adapt, target, eta_min, accepted):
    """Accept/reject every row in place; returns the number of NaN ratios."""
    t, d = z.shape
    nan = 0
    for k in range(t):
        r = betas[k] * (llp[k] - ll[k])
        if kind != PCN:
            r += lpp[k] - lp[k]
        ok = False
        if np.isnan(r):
            nan += 1
        elif log_u[k] < r:
            ok = True
        accepted[k] = ok
        if ok:
            for i in range(d):
                z[k, i] = zp[k, i]
            ll[k] = llp[k]
            if kind != PCN:
                lp[k] = lpp[k]
            accept_count[k] += 1
        if adapt and gain != 0.0:
            eta[k] *= np.exp((gain / n) * ((1.0 if ok else 0.0) - target))
            if kind == PCN:
                if eta[k] < eta_min:
                    eta[k] = eta_min
                elif eta[k] > 1.0:
                    eta[k] = 1.0
    return nan


@njit(cache=True)
def swap_round(z, ll, lp, betas, log_u, parity, attempts, accepts, accepted):
    t, d = z.shape
    for k in range(t - 1):
        accepted[k] = False
    for k in range(parity, t - 1, 2):
        attempts[k] += 1
        if betas[k] == betas[k + 1]:
            r = 0.0
        else:
            r = (betas[k] - betas[k + 1]) * (ll[k + 1] - ll[k])
        if not np.isnan(r) and log_u[k] < r:
            accepted[k] = True
            accepts[k] += 1
            for i in range(d):
                tmp = z[k, i]
                z[k, i] = z[k + 1, i]
                z[k + 1, i] = tmp
            tmp = ll[k]
            ll[k] = ll[k + 1]
            ll[k + 1] = tmp
            tmp = lp[k]
            lp[k] = lp[k + 1]
            lp[k + 1] = tmp
