"""Joint log-density of the two-component spectral model.

The mean of the data is a template part ``T beta`` plus a wavelet part
``xi = W^-1 theta``. Noise is iid Gaussian with precision ``lam`` on the
extended (length ``p``) signal. Wavelet coefficients carry a normal-gamma
shrinkage prior with local precisions ``psi``; the truncation limits ``tau``
keep ``xi`` above a small negative threshold ``h`` at observed positions.

Tempering at temperature ``T`` multiplies the log-likelihood by ``1/T`` and
the shrinkage shape ``c`` by ``T``; at ``T = 1`` the untempered posterior is
recovered exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from . import truncnorm
from .spectrum import Spectrum
from .templates import SignatureCatalog, build_template_matrix, multiplet_on_grid
from .wavelets import WaveletPlan, make_plan

_LOG_2PI = math.log(2 * math.pi)


class ConsistencyError(ValueError):
    pass


def lognormal_sigma2(median: float, variance: float) -> float:
    """Log-scale variance of a log-normal with the given median and variance."""
    v = variance / median**2
    # (e^s - 1) e^s = v  ->  e^s = (1 + sqrt(1 + 4v)) / 2
    return math.log((1.0 + math.sqrt(1.0 + 4.0 * v)) / 2.0)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters. ``c``/``d`` may be per wavelet level (approximation
    band first), ``e``/``s`` per metabolite; scalars broadcast."""

    a: float = 1e-9
    b: float = 1e-6
    c: float | Sequence[float] = 0.05
    d: float | Sequence[float] = 1e-8
    h: float = -0.002
    r: float = 1e5
    e: float | Sequence[float] = 0.0
    s: float | Sequence[float] = 1e-3
    gamma_median_hz: float = 1.0
    gamma_var_hz2: float = 4.6
    random_effects: bool = False
    re_sd: float = 0.02

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or np.any(np.asarray(self.s) < 0):
            raise ValueError("a, b and s must be nonnegative")
        if np.any(np.asarray(self.c) <= 0) or np.any(np.asarray(self.d) <= 0):
            raise ValueError("c and d must be positive")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not self.h < 0:
            raise ValueError("h must be negative")
        if not (self.gamma_median_hz > 0 and self.gamma_var_hz2 > 0):
            raise ValueError("peak-width prior needs positive median and variance")
        if self.random_effects and not self.re_sd > 0:
            raise ValueError("re_sd must be positive when random effects are on")

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, (tuple, list, np.ndarray)) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)

    def scaled(self, S: float) -> "PriorConfig":
        """Threshold ``h`` moved to a data scale multiplied by ``S``."""
        return replace(self, h=self.h * S)


def _per(value, count: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(count, float(arr))
    if arr.size != count:
        raise ValueError(f"{what}: expected {count} values, got {arr.size}")
    return arr.astype(float).copy()


class SpectrumModel:
    """Everything fixed while sampling one spectrum: data, catalog, plan, prior."""

    def __init__(self, spectrum: Spectrum, catalog: SignatureCatalog, config: PriorConfig | None = None,
                 plan: WaveletPlan | None = None, levels: int | None = None):
        self.spectrum = spectrum
        self.catalog = catalog
        self.config = config or PriorConfig()
        self.plan = plan or make_plan(spectrum.n, levels)
        if self.plan.n != spectrum.n:
            raise ValueError("wavelet plan does not match spectrum length")
        cfg = self.config
        plan = self.plan
        self.n, self.p = plan.n, plan.p
        self.M = len(catalog)
        self.y = np.asarray(spectrum.y, dtype=float)
        self.Y = plan.extend(self.y)
        self.x0 = float(spectrum.x[0])
        self.dx = spectrum.grid.spacing
        self.F = spectrum.grid.spectrometer_frequency
        self.multiplets = catalog.multiplets
        self.U = len(self.multiplets)
        self.owner = catalog.owner
        self.members = [np.flatnonzero(self.owner == m) for m in range(self.M)]
        self.shift_mean = np.array([mu.shift_estimate for mu in self.multiplets])
        self.shift_sd = np.array([mu.shift_prior_sd for mu in self.multiplets])
        hw = np.array([mu.shift_prior_halfwidth for mu in self.multiplets])
        self.shift_lo = self.shift_mean - hw
        self.shift_hi = self.shift_mean + hw
        nlev = plan.levels + 1
        self.c = _per(cfg.c, nlev, "c")[plan.level_of]
        self.d = _per(cfg.d, nlev, "d")[plan.level_of]
        self.e = _per(cfg.e, self.M, "e")
        self.s = _per(cfg.s, self.M, "s")
        self.gamma_mu = math.log(cfg.gamma_median_hz / self.F)
        self.gamma_s2 = lognormal_sigma2(cfg.gamma_median_hz, cfg.gamma_var_hz2)
        self.basis = plan.basis
        pad = np.arange(self.n, self.p)
        self.pad_pos = pad
        self.pad_src = plan.ext_index[pad]
        self.mult = plan.ext_multiplicity

    # -- template evaluation ------------------------------------------------

    def multiplet_values(self, u: int, gamma: float, shift: float):
        return multiplet_on_grid(self.multiplets[u], gamma, shift, self.x0, self.dx, self.n)

    def template_matrix(self, gamma: float, shifts, re) -> np.ndarray:
        return build_template_matrix(self.catalog, gamma, shifts, re, self.spectrum.grid).values

    def column(self, m: int, gamma: float, shifts, re_m: float) -> np.ndarray:
        col = np.zeros(self.n)
        g = gamma * math.exp(re_m)
        for u in self.members[m]:
            start, vals = self.multiplet_values(u, g, shifts[u])
            col[start : start + vals.size] += vals
        return col

    def extend_window(self, start: int, vals: np.ndarray):
        """Positions in the extended signal touched by an observed window."""
        stop = start + vals.size
        obs = np.arange(start, stop)
        sel = (self.pad_src >= start) & (self.pad_src < stop)
        pos = np.concatenate([obs, self.pad_pos[sel]])
        return pos, np.concatenate([vals, vals[self.pad_src[sel] - start]])

    def sqnorm_ext(self, col: np.ndarray) -> float:
        return float(np.dot(self.mult, col * col))


@dataclass
class ModelState:
    """One spectrum's parameters plus cached derived quantities.

    Caches: ``cols`` (template matrix), ``fit = cols @ beta``,
    ``xi = W^-1 theta`` (length ``p``) and ``resid = Y - ext(fit) - xi``.
    """

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    lam: float
    gamma: float
    shifts: np.ndarray
    re: np.ndarray
    cols: np.ndarray = field(default=None, repr=False)
    fit: np.ndarray = field(default=None, repr=False)
    xi: np.ndarray = field(default=None, repr=False)
    resid: np.ndarray = field(default=None, repr=False)

    def copy(self) -> "ModelState":
        return ModelState(*(np.array(v, copy=True) if isinstance(v, np.ndarray) else v
                            for v in (self.beta, self.theta, self.psi, self.tau, self.lam, self.gamma,
                                      self.shifts, self.re, self.cols, self.fit, self.xi, self.resid)))

    def refresh(self, model: SpectrumModel, templates: bool = True) -> "ModelState":
        if templates or self.cols is None:
            self.cols = model.template_matrix(self.gamma, self.shifts, self.re)
        self.fit = self.cols @ self.beta
        self.xi = model.plan.synthesize(self.theta)
        self.resid = model.Y - model.plan.extend(self.fit) - self.xi
        return self

    def cache_error(self, model: SpectrumModel) -> float:
        fresh = self.copy().refresh(model)
        errs = [np.max(np.abs(getattr(fresh, k) - getattr(self, k)), initial=0.0)
                for k in ("cols", "fit", "xi", "resid")]
        return float(max(errs))

    @property
    def xi_obs(self) -> np.ndarray:
        return self.xi[: self.tau.size]


def initial_state(model: SpectrumModel, beta=None, theta=None, lam: float | None = None,
                  gamma: float | None = None, shifts=None) -> ModelState:
    """A feasible starting point (``tau <= min(h, xi)``) with caches filled."""
    cfg = model.config
    beta = np.zeros(model.M) if beta is None else np.array(beta, dtype=float)
    theta = np.zeros(model.p) if theta is None else np.array(theta, dtype=float)
    gamma = math.exp(model.gamma_mu) if gamma is None else float(gamma)
    shifts = model.shift_mean.copy() if shifts is None else np.array(shifts, dtype=float)
    if lam is None:
        # robust noise precision from second differences of the data
        dd = np.diff(model.y, 2)
        sd = 1.4826 * np.median(np.abs(dd - np.median(dd))) / math.sqrt(6.0)
        sd = sd if sd > 0 else max(np.std(model.y), 1e-12) * 1e-3
        lam = 1.0 / sd**2
    psi = np.where(theta != 0.0, 1.0 / np.maximum(lam * theta**2, 1e-300), 1.0 / model.d)
    psi = np.clip(psi, 1e-12, 1e300)
    st = ModelState(beta, theta, psi, np.zeros(model.n), float(lam), gamma, shifts, np.zeros(model.M))
    st.refresh(model)
    st.tau = np.minimum(cfg.h, st.xi_obs).copy()
    return st


# -- densities ---------------------------------------------------------------


def log_likelihood(state: ModelState, model: SpectrumModel) -> float:
    rss = float(np.dot(state.resid, state.resid))
    return 0.5 * model.p * (math.log(state.lam) - _LOG_2PI) - 0.5 * state.lam * rss


def log_likelihood_wavelet(state: ModelState, model: SpectrumModel) -> float:
    """Same value computed in the coefficient domain (for cross-checks)."""
    plan = model.plan
    r = plan.analyze(model.Y) - plan.analyze(plan.extend(state.cols @ state.beta)) - state.theta
    return 0.5 * model.p * (math.log(state.lam) - _LOG_2PI) - 0.5 * state.lam * float(r @ r)


def _lambda_prior_terms(state, model, cfg):
    quad = cfg.b + float(np.dot(state.psi, state.theta**2)) + cfg.r * float(np.sum((state.tau - cfg.h) ** 2))
    return (cfg.a + 0.5 * (model.p + model.n) - 1.0) * math.log(state.lam) - 0.5 * state.lam * quad


def log_prior_beta(beta, model: SpectrumModel) -> float:
    if np.any(beta < 0):
        return -np.inf
    return float(-0.5 * np.sum(model.s * (beta - model.e) ** 2))


def log_prior(state: ModelState, model: SpectrumModel, temperature: float = 1.0,
              include_beta: bool = True) -> float:
    """Unnormalized log prior; ``-inf`` outside the support."""
    cfg = model.config
    if not (state.lam > 0 and state.gamma > 0) or np.any(state.psi <= 0):
        return -np.inf
    if np.any(state.tau > cfg.h) or np.any(state.tau > state.xi_obs):
        return -np.inf
    if np.any(state.shifts < model.shift_lo) or np.any(state.shifts > model.shift_hi):
        return -np.inf
    lp = _lambda_prior_terms(state, model, cfg)
    lp += float(np.sum((model.c * temperature - 0.5) * np.log(state.psi) - 0.5 * state.psi * model.d))
    if include_beta:
        lp += log_prior_beta(state.beta, model)
    lp += float(-0.5 * np.sum(((state.shifts - model.shift_mean) / model.shift_sd) ** 2))
    lg = math.log(state.gamma)
    lp += -0.5 * (lg - model.gamma_mu) ** 2 / model.gamma_s2 - lg
    if cfg.random_effects:
        lp += float(-0.5 * np.sum((state.re / cfg.re_sd) ** 2))
    elif np.any(state.re != 0):
        return -np.inf
    return lp


def log_posterior(state: ModelState, model: SpectrumModel, temperature: float = 1.0) -> float:
    lp = log_prior(state, model, temperature)
    if lp == -np.inf:
        return lp
    return log_likelihood(state, model) / temperature + lp


def multi_spectrum_log_posterior(states: Sequence[ModelState], models: Sequence[SpectrumModel],
                                 temperature: float = 1.0) -> float:
    """Joint model with concentrations shared across spectra."""
    if len(states) != len(models) or not states:
        raise ConsistencyError("need one state per spectrum")
    beta = states[0].beta
    for st in states[1:]:
        if st.beta.shape != beta.shape or not np.array_equal(st.beta, beta):
            raise ConsistencyError("concentrations differ between spectra")
    total = log_prior_beta(beta, models[0])
    if total == -np.inf:
        return total
    for st, mod in zip(states, models):
        lp = log_prior(st, mod, temperature, include_beta=False)
        if lp == -np.inf:
            return lp
        total += lp + log_likelihood(st, mod) / temperature
    return total


# -- full conditionals -------------------------------------------------------


@dataclass(frozen=True)
class Conditional:
    """A univariate full conditional: truncated normal or gamma (shape/rate)."""

    family: str
    params: dict

    def logpdf(self, x) -> np.ndarray:
        p = self.params
        if self.family == "truncnorm":
            return truncnorm.logpdf(x, p["mean"], p["sd"], p["lo"], p["hi"])
        return stats.gamma.logpdf(x, p["shape"], scale=1.0 / p["rate"])

    def sample(self, rng, size=None):
        p = self.params
        if self.family == "truncnorm":
            if size is None:
                return truncnorm.sample(rng, p["mean"], p["sd"], p["lo"], p["hi"])
            return truncnorm.sample(rng, np.full(size, p["mean"]), p["sd"], p["lo"], p["hi"])
        return rng.gamma(p["shape"], 1.0 / p["rate"], size=size)


def theta_interval(state: ModelState, model: SpectrumModel, k: int):
    """Feasible range of coefficient ``k`` keeping ``xi >= tau`` at observed points."""
    rows, vals = model.basis.column(k)
    obs = rows < model.n
    rows, vals = rows[obs], vals[obs]
    slack = (state.tau[rows] - state.xi[rows]) / vals
    th = state.theta[k]
    pos, neg = vals > 0, vals < 0
    lo = th + np.max(slack[pos]) if pos.any() else -np.inf
    hi = th + np.min(slack[neg]) if neg.any() else np.inf
    return float(lo), float(hi)


def beta_conditional(states: Sequence[ModelState], models: Sequence[SpectrumModel], m: int,
                     temperature: float = 1.0) -> Conditional:
    kappa = 1.0 / temperature
    prec = models[0].s[m]
    lin = models[0].s[m] * models[0].e[m]
    for st, mod in zip(states, models):
        t = mod.plan.extend(st.cols[:, m])
        partial = st.resid + st.beta[m] * t
        prec += kappa * st.lam * float(t @ t)
        lin += kappa * st.lam * float(t @ partial)
    return Conditional("truncnorm", dict(mean=lin / prec, sd=1.0 / math.sqrt(prec), lo=0.0, hi=np.inf))


def full_conditional_params(state: ModelState, model: SpectrumModel, which: str, index: int = 0,
                            temperature: float = 1.0) -> Conditional:
    """Full conditional of one coordinate: ``beta``, ``theta``, ``psi``, ``tau`` or ``lam``."""
    cfg = model.config
    kappa = 1.0 / temperature
    lam = state.lam
    if which == "beta":
        return beta_conditional([state], [model], index, temperature)
    if which == "theta":
        k = index
        rows, vals = model.basis.column(k)
        w = float(vals @ state.resid[rows]) + state.theta[k]
        prec = lam * (kappa + state.psi[k])
        lo, hi = theta_interval(state, model, k)
        return Conditional("truncnorm", dict(mean=kappa * w * lam / prec, sd=1.0 / math.sqrt(prec), lo=lo, hi=hi))
    if which == "psi":
        k = index
        shape = model.c[k] * temperature + 0.5
        rate = 0.5 * (model.d[k] + lam * state.theta[k] ** 2)
        return Conditional("gamma", dict(shape=shape, rate=rate))
    if which == "tau":
        i = index
        upper = min(cfg.h, state.xi[i])
        return Conditional("truncnorm", dict(mean=cfg.h, sd=1.0 / math.sqrt(lam * cfg.r), lo=-np.inf, hi=upper))
    if which == "lam":
        shape = cfg.a + 0.5 * (model.p + model.n) + 0.5 * kappa * model.p
        quad = (cfg.b + float(np.dot(state.psi, state.theta**2))
                + cfg.r * float(np.sum((state.tau - cfg.h) ** 2))
                + kappa * float(np.dot(state.resid, state.resid)))
        return Conditional("gamma", dict(shape=shape, rate=0.5 * quad))
    raise ValueError(f"unknown coordinate family {which!r}")
