"""Compiled inner loops for the sampler."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .truncnorm import log_ndtr, sample1

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@nb.njit(cache=True)
def theta_sweep(theta, psi, w, xi, tau, lam, kappa, n, indptr, indices, data, u):
    """Componentwise truncated-normal update of every wavelet coefficient.

    ``w`` holds the coefficients of the template residual, which do not
    depend on ``theta`` because the basis is orthonormal. ``xi`` is kept in
    step with ``theta``.
    """
    p = theta.size
    for k in range(p):
        prec = lam * (kappa + psi[k])
        mean = kappa * w[k] * lam / prec
        sd = 1.0 / math.sqrt(prec)
        th = theta[k]
        lo = -np.inf
        hi = np.inf
        for q in range(indptr[k], indptr[k + 1]):
            i = indices[q]
            if i >= n:
                continue
            v = data[q]
            b = th + (tau[i] - xi[i]) / v
            if v > 0.0:
                if b > lo:
                    lo = b
            elif b < hi:
                hi = b
        if lo > hi:
            # rounding left no room; keep the current value
            continue
        new = sample1(mean, sd, lo, hi, u[k])
        d = new - th
        if d == 0.0:
            continue
        # a draw at the edge of the interval can cross tau by rounding
        ok = True
        for q in range(indptr[k], indptr[k + 1]):
            i = indices[q]
            if i < n and xi[i] + d * data[q] < tau[i]:
                ok = False
                break
        if ok:
            theta[k] = new
            for q in range(indptr[k], indptr[k + 1]):
                xi[indices[q]] += d * data[q]


@nb.njit(cache=True)
def eta_propose(mean, tau, sd, n, z, u, out):
    """Independent draws: truncated below at ``tau`` on observed positions,
    plain normal on the padding."""
    for i in range(mean.size):
        x = mean[i] + sd * z[i]
        if i < n and x < tau[i]:
            x = max(sample1(mean[i], sd, tau[i], np.inf, u[i]), tau[i])
        out[i] = x


@nb.njit(cache=True)
def eta_logq(eta, mean, tau, sd, n):
    """Log density of ``eta`` under the proposal of ``eta_propose``."""
    total = 0.0
    lsd = math.log(sd)
    for i in range(mean.size):
        zz = (eta[i] - mean[i]) / sd
        total += -0.5 * zz * zz - lsd - _HALF_LOG_2PI
        if i < n:
            if eta[i] < tau[i]:
                return -np.inf
            a = (tau[i] - mean[i]) / sd
            if a > -38.0:
                total -= log_ndtr(-a)
    return total
