"""Truncated normal sampling and densities, safe deep into the tails.

Sampling inverts the CDF in log space, using the symmetry of the normal so
that only lower-tail probabilities are ever inverted. Each draw consumes
exactly one uniform, which keeps random streams aligned across runs.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


@nb.njit(cache=True)
def log_ndtr(x):
    """log Phi(x)."""
    if x > 5.0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    # asymptotic series for the far lower tail
    x2 = x * x
    s = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2)
    return -0.5 * x2 - 0.5 * _LOG_2PI - math.log(-x) + math.log(s)


@nb.njit(cache=True)
def _acklam(p):
    a1, a2, a3 = -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02
    a4, a5, a6 = 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00
    b1, b2, b3 = -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02
    b4, b5 = 6.680131188771972e01, -1.328068155288572e01
    c1, c2, c3 = -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00
    c4, c5, c6 = -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00
    d1, d2, d3, d4 = 7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c1 * q + c2) * q + c3) * q + c4) * q + c5) * q + c6) / (
            (((d1 * q + d2) * q + d3) * q + d4) * q + 1.0
        )
    q = p - 0.5
    r = q * q
    return (((((a1 * r + a2) * r + a3) * r + a4) * r + a5) * r + a6) * q / (
        ((((b1 * r + b2) * r + b3) * r + b4) * r + b5) * r + 1.0
    )


@nb.njit(cache=True)
def ndtri_log(logp):
    """Inverse of ``log_ndtr`` for ``logp <= log(0.5)``."""
    if logp > -700.0:
        x = _acklam(math.exp(logp))
    else:
        t = -2.0 * logp
        x = -math.sqrt(t - math.log(t) - _LOG_2PI)
    for _ in range(50):
        lf = log_ndtr(x)
        f = lf - logp
        # d/dx log Phi(x) = phi(x) / Phi(x)
        slope = math.exp(-0.5 * x * x - 0.5 * _LOG_2PI - lf)
        step = f / slope
        x -= step
        if abs(step) <= 1e-14 * (1.0 + abs(x)):
            break
    return x


@nb.njit(cache=True)
def log_mass(a, b):
    """log(Phi(b) - Phi(a)) for standardized limits ``a < b``."""
    if b <= 0.0:
        la = log_ndtr(a)
        lb = log_ndtr(b)
        return lb + math.log1p(-math.exp(la - lb))
    if a >= 0.0:
        la = log_ndtr(-b)
        lb = log_ndtr(-a)
        return lb + math.log1p(-math.exp(la - lb))
    return math.log1p(-math.exp(log_ndtr(a)) - math.exp(log_ndtr(-b)))


@nb.njit(cache=True)
def _sample_lower(a, b, u):
    # interval with b <= 0: invert inside the lower tail
    la = log_ndtr(a)
    lb = log_ndtr(b)
    # log(u Phi(b) + (1 - u) Phi(a)) without underflow at u = 0
    if u <= 0.0:
        lp = la
    elif u >= 1.0:
        lp = lb
    else:
        s1 = lb + math.log(u)
        s2 = la + math.log1p(-u)
        hi = max(s1, s2)
        lp = hi + math.log1p(math.exp(min(s1, s2) - hi))
    if lp == -np.inf:
        return a
    x = ndtri_log(lp)
    return min(max(x, a), b)


@nb.njit(cache=True)
def std_sample(a, b, u):
    """Standard normal truncated to ``[a, b]`` from one uniform ``u`` in (0, 1)."""
    if a >= b:
        return a
    if b <= 0.0:
        return _sample_lower(a, b, u)
    if a >= 0.0:
        return -_sample_lower(-b, -a, 1.0 - u)
    pa = math.exp(log_ndtr(a))
    qb = math.exp(log_ndtr(-b))
    mass = 1.0 - pa - qb
    p = pa + u * mass
    if p <= 0.5:
        x = ndtri_log(math.log(p)) if p > 0.0 else a
    else:
        q = qb + (1.0 - u) * mass
        x = -ndtri_log(math.log(q)) if q > 0.0 else b
    return min(max(x, a), b)


@nb.njit(cache=True)
def sample1(mu, sd, lo, hi, u):
    x = mu + sd * std_sample((lo - mu) / sd, (hi - mu) / sd, u)
    # undo rounding in the change of scale
    return min(max(x, lo), hi)


@nb.njit(cache=True)
def logpdf1(x, mu, sd, lo, hi):
    if x < lo or x > hi:
        return -np.inf
    z = (x - mu) / sd
    return -0.5 * z * z - 0.5 * _LOG_2PI - math.log(sd) - log_mass((lo - mu) / sd, (hi - mu) / sd)


@nb.njit(cache=True)
def _sample_vec(mu, sd, lo, hi, u, out):
    for i in range(out.size):
        out[i] = sample1(mu[i], sd[i], lo[i], hi[i], u[i])


@nb.njit(cache=True)
def _logpdf_vec(x, mu, sd, lo, hi, out):
    for i in range(out.size):
        out[i] = logpdf1(x[i], mu[i], sd[i], lo[i], hi[i])


def _broadcast(*args):
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    return [np.ascontiguousarray(a).ravel() for a in arrs], arrs[0].shape


def sample(rng, mu, sd, lo=-np.inf, hi=np.inf):
    """Draw from N(mu, sd^2) truncated to [lo, hi]; broadcasts its arguments."""
    (mu, sd, lo, hi), shape = _broadcast(mu, sd, lo, hi)
    u = rng.random(mu.size)
    out = np.empty(mu.size)
    _sample_vec(mu, sd, lo, hi, u, out)
    return out.reshape(shape) if shape else float(out[0])


def sample_from_uniforms(u, mu, sd, lo=-np.inf, hi=np.inf):
    (u, mu, sd, lo, hi), shape = _broadcast(u, mu, sd, lo, hi)
    out = np.empty(mu.size)
    _sample_vec(mu, sd, lo, hi, u, out)
    return out.reshape(shape) if shape else float(out[0])


def logpdf(x, mu, sd, lo=-np.inf, hi=np.inf):
    (x, mu, sd, lo, hi), shape = _broadcast(x, mu, sd, lo, hi)
    out = np.empty(x.size)
    _logpdf_vec(x, mu, sd, lo, hi, out)
    return out.reshape(shape) if shape else float(out[0])
