"""Data-driven starting values for the sampler.

A greedy least-squares fit places every multiplet before any MCMC is run:
shifts are grid-searched inside their prior windows, the peak-width is
line-searched, and concentrations come from a fit that also includes the
smooth (approximation-band) wavelets as a free baseline. The wavelet
coefficients then start from a hard-thresholded transform of what the
templates leave unexplained.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import lsq_linear

from .posterior import ModelState, SpectrumModel

GAMMA_FACTORS = np.exp(np.linspace(math.log(0.25), math.log(12.0), 21))


class _Fitter:
    def __init__(self, model: SpectrumModel):
        self.model = model
        nb = model.p >> model.plan.levels
        cols = []
        for k in range(nb):
            unit = np.zeros(model.p)
            unit[k] = 1.0
            cols.append(model.plan.synthesize(unit)[: model.n])
        self.baseline = np.column_stack(cols)
        self.M = model.M

    def solve(self, cols):
        A = np.column_stack([cols, self.baseline])
        G = A.T @ A
        b = A.T @ self.model.y
        scale = np.sqrt(np.maximum(np.diag(G), 1e-300))
        Gs = G / np.outer(scale, scale) + 1e-12 * np.eye(G.shape[0])
        R = np.linalg.cholesky(Gs).T
        rhs = np.linalg.solve(R.T, b / scale)
        lb = np.concatenate([np.zeros(self.M), np.full(self.baseline.shape[1], -np.inf)])
        sol = lsq_linear(R, rhs, bounds=(lb, np.inf), method="bvls").x / scale
        r = self.model.y - A @ sol
        return sol[: self.M], sol[self.M :], float(r @ r)


def _search_shifts(fit: _Fitter, gamma, shifts, re, passes=2):
    model = fit.model
    cols = model.template_matrix(gamma, shifts, re)
    step = 0.5 * model.dx
    for _ in range(passes):
        for u in range(model.U):
            m = int(model.owner[u])
            grid = np.arange(model.shift_lo[u], model.shift_hi[u] + 0.5 * step, step)
            grid = np.clip(grid, model.shift_lo[u], model.shift_hi[u])
            best, best_rss = shifts[u], np.inf
            for cand in grid:
                trial = shifts.copy()
                trial[u] = cand
                cols[:, m] = model.column(m, gamma, trial, re[m])
                rss = fit.solve(cols)[2]
                if rss < best_rss:
                    best, best_rss = cand, rss
            shifts[u] = best
            cols[:, m] = model.column(m, gamma, shifts, re[m])
    return shifts


def _search_gamma(fit: _Fitter, gamma, shifts, re):
    model = fit.model
    best, best_rss = gamma, np.inf
    for g in gamma * GAMMA_FACTORS:
        rss = fit.solve(model.template_matrix(g, shifts, re))[2]
        if rss < best_rss:
            best, best_rss = g, rss
    return best


def locate(model: SpectrumModel, gamma: float | None = None, shifts=None, rounds: int = 2):
    """Least-squares shifts, peak-width and concentrations: ``(gamma, shifts, beta)``."""
    fit = _Fitter(model)
    re = np.zeros(model.M)
    shifts = model.shift_mean.copy() if shifts is None else np.array(shifts, dtype=float)
    gamma = math.exp(model.gamma_mu) * 2.0 if gamma is None else float(gamma)
    for _ in range(rounds):
        shifts = _search_shifts(fit, gamma, shifts, re, passes=1)
        gamma = _search_gamma(fit, gamma, shifts, re)
    shifts = _search_shifts(fit, gamma, shifts, re, passes=1)
    beta = fit.solve(model.template_matrix(gamma, shifts, re))[0]
    return gamma, shifts, beta


def wavelet_start(model: SpectrumModel, beta, gamma: float, shifts, temperature: float = 1.0) -> ModelState:
    """Feasible state with the given template parameters and wavelets fitted
    to what the templates leave unexplained."""
    cfg = model.config
    plan = model.plan
    beta = np.array(beta, dtype=float)
    re = np.zeros(model.M)
    resid = model.Y - plan.extend(model.template_matrix(gamma, shifts, re) @ beta)
    theta = plan.analyze(resid)
    finest = theta[plan.level_of == plan.levels]
    sigma = 1.4826 * np.median(np.abs(finest - np.median(finest)))
    if not sigma > 0:
        sigma = max(float(np.std(finest)), 1e-12 * max(np.abs(model.y).max(), 1e-300))
    keep = (plan.level_of == 0) | (np.abs(theta) > 3.0 * sigma)
    theta = np.where(keep, theta, 0.0)
    lam = 1.0 / sigma**2
    psi = (model.c * temperature + 0.5) / (0.5 * (model.d + lam * theta**2))
    st = ModelState(beta, theta, psi, np.zeros(model.n), lam, float(gamma), np.array(shifts, dtype=float), re)
    st.refresh(model)
    st.tau = np.minimum(cfg.h, st.xi_obs) - 0.8 / math.sqrt(lam * cfg.r)
    return st


def warm_start(model: SpectrumModel, temperature: float = 1.0, **kw) -> ModelState:
    gamma, shifts, beta = locate(model, **kw)
    return wavelet_start(model, beta, gamma, shifts, temperature)


def initial_steps(state: ModelState, model: SpectrumModel):
    """Proposal scales from the local curvature of the log-likelihood.

    Returns ``(shift_steps, logwidth_step, re_steps)`` as standard
    deviations, each about 2.4 posterior standard deviations.
    """
    lam = state.lam
    eps = 1e-6
    shift_steps = np.full(model.U, 0.002)
    for u in range(model.U):
        m = int(model.owner[u])
        if state.beta[m] <= 0:
            continue
        sp = state.shifts.copy()
        sp[u] += eps
        sm = state.shifts.copy()
        sm[u] -= eps
        d = (model.column(m, state.gamma, sp, state.re[m]) - model.column(m, state.gamma, sm, state.re[m])) / (2 * eps)
        info = lam * state.beta[m] ** 2 * model.sqnorm_ext(d)
        if info > 0:
            shift_steps[u] = 2.4 / math.sqrt(info)
    shift_steps = np.clip(shift_steps, 1e-6, 0.01)

    def width_info(cols_fn):
        h = 1e-4
        d = (cols_fn(h) - cols_fn(-h)) / (2 * h)
        return lam * model.sqnorm_ext(d)

    info = width_info(lambda h: model.template_matrix(state.gamma * math.exp(h), state.shifts, state.re) @ state.beta)
    logwidth = float(np.clip(2.4 / math.sqrt(info), 1e-4, 0.5)) if info > 0 else 0.1
    re_steps = np.full(model.M, 0.02)
    for m in range(model.M):
        if state.beta[m] <= 0:
            continue
        def col(h, m=m):
            return state.beta[m] * model.column(m, state.gamma, state.shifts, state.re[m] + h)
        info = width_info(col)
        if info > 0:
            re_steps[m] = 2.4 / math.sqrt(info)
    return shift_steps, logwidth, np.clip(re_steps, 1e-4, 0.5)
