"""Population MCMC for the template-plus-wavelet model.

One iteration of every chain runs, in this fixed order: a Gibbs sweep
(concentrations, wavelet coefficients, local precisions, truncation limits,
noise precision), adaptive Metropolis updates of each multiplet shift, the
log peak-width and any random effects, the block moves that pair a shift or a
concentration with a fresh proposal of all wavelet coefficients, then (for
populations) copy moves for every shift and a sweep of exchange moves between
neighbouring temperatures.

Spectra fitted jointly share one concentration vector; a single spectrum is
the one-element case of the same code path.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels, truncnorm
from .posterior import (
    ModelState,
    PriorConfig,
    SpectrumModel,
    beta_conditional,
    initial_state,
    log_likelihood,
    multi_spectrum_log_posterior,
)
from .spectrum import SpectrumSet, as_spectrum_set
from .templates import SignatureCatalog
from .warmstart import initial_steps, locate, wavelet_start


class ConfigurationError(ValueError):
    pass


class ChainFault(RuntimeError):
    """Numerical breakdown of a chain; ``dump`` holds the offending state."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 5000
    burnin: int = 3000
    thin: int = 1
    chains: int = 8
    t_start: float = 32.0
    ladder_max: float = 32.0
    anneal: bool = True
    anneal_mu: float | None = None
    anneal_sigma: float | None = None
    block_shift_sd: float = 0.005
    copy_scale: float = 3.0
    greedy_scale: float = 0.2
    greedy_offset: float = 1e-4
    adapt_batch: int = 50
    target_accept: float = 0.44
    block_moves: bool = True
    warm_start: bool = True
    refresh_every: int = 100

    def __post_init__(self):
        if not self.iterations > self.burnin >= 0:
            raise ConfigurationError("need iterations > burnin >= 0")
        if self.chains < 1 or self.thin < 1:
            raise ConfigurationError("chains and thin must be at least 1")
        if self.t_start < 1 or self.ladder_max < 1:
            raise ConfigurationError("temperatures must be at least 1")
        if self.chains > 1 and not self.ladder_max > 1:
            raise ConfigurationError("a population needs ladder_max > 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burnin) // self.thin


def anneal_temperature(i: int, t_start: float, burnin: int, mu: float | None = None,
                       sigma: float | None = None) -> float:
    """Target-chain temperature at iteration ``i``; exactly 1 from ``burnin`` on."""
    if i < 0:
        raise ValueError("iteration must be nonnegative")
    if t_start <= 1.0 or burnin <= 0 or i >= burnin:
        return 1.0
    mu = burnin / 3.0 if mu is None else mu
    sigma = burnin / 6.0 if sigma is None else sigma
    sf = lambda z: 0.5 * math.erfc(z / math.sqrt(2.0))
    return 1.0 + (t_start - 1.0) * sf((i - mu) / sigma) / sf(-mu / sigma)


def ladder_ratios(chains: int, ladder_max: float) -> np.ndarray:
    if chains == 1:
        return np.ones(1)
    rho = ladder_max ** (1.0 / (chains - 1))
    return rho ** np.arange(chains)


class AdaptiveStep:
    """Batch-wise log step-size adaptation towards a target acceptance rate."""

    def __init__(self, steps, batch: int = 50, target: float = 0.44):
        self.log_step = np.log(np.atleast_1d(np.asarray(steps, dtype=float))).copy()
        size = self.log_step.size
        self.batch = batch
        self.target = target
        self.batch_acc = np.zeros(size, dtype=np.int64)
        self.batch_n = np.zeros(size, dtype=np.int64)
        self.batches = np.zeros(size, dtype=np.int64)
        self.accepted = np.zeros(size, dtype=np.int64)
        self.tried = np.zeros(size, dtype=np.int64)
        self.frozen = False

    def step(self, j: int = 0) -> float:
        return float(math.exp(self.log_step[j]))

    def record(self, j: int, accepted: bool):
        self.tried[j] += 1
        self.accepted[j] += bool(accepted)
        if self.frozen:
            return
        self.batch_n[j] += 1
        self.batch_acc[j] += bool(accepted)
        if self.batch_n[j] == self.batch:
            self.batches[j] += 1
            delta = min(0.01, self.batches[j] ** -0.5)
            rate = self.batch_acc[j] / self.batch
            self.log_step[j] += delta if rate > self.target else -delta
            self.batch_n[j] = 0
            self.batch_acc[j] = 0

    def copy(self) -> "AdaptiveStep":
        out = AdaptiveStep(np.exp(self.log_step), self.batch, self.target)
        for k in ("batch_acc", "batch_n", "batches", "accepted", "tried"):
            setattr(out, k, getattr(self, k).copy())
        out.frozen = self.frozen
        return out


MOVES = ("mh_shift", "mh_logwidth", "mh_re", "block_shift_theta", "block_beta_theta", "copy", "exchange")


class ChainState:
    """One temperature slot: the per-spectrum states (sharing ``beta``), the
    slot's temperature, random stream, step sizes and move counters."""

    def __init__(self, states: list, temperature: float, rng: np.random.Generator, adapt: dict, slot: int = 0):
        self.states = states
        self.temperature = float(temperature)
        self.rng = rng
        self.adapt = adapt
        self.slot = slot
        self.counts = {k: [0, 0] for k in MOVES}

    @property
    def beta(self) -> np.ndarray:
        return self.states[0].beta

    def count(self, move: str, accepted: bool):
        c = self.counts[move]
        c[0] += bool(accepted)
        c[1] += 1

    def share_beta(self):
        beta = self.states[0].beta
        for st in self.states[1:]:
            st.beta = beta


def copy_states(states: Sequence[ModelState]) -> list:
    out = [st.copy() for st in states]
    for st in out[1:]:
        st.beta = out[0].beta
    return out


# -- helpers ------------------------------------------------------------------


def _window_delta(mod: SpectrumModel, st: ModelState, u: int, new_shift: float):
    """Change of template column ``owner[u]`` when multiplet ``u`` moves."""
    m = int(mod.owner[u])
    g = st.gamma * math.exp(st.re[m])
    sa, va = mod.multiplet_values(u, g, st.shifts[u])
    sb, vb = mod.multiplet_values(u, g, new_shift)
    start = min(sa, sb)
    stop = max(sa + va.size, sb + vb.size)
    d = np.zeros(max(stop - start, 0))
    d[sb - start : sb - start + vb.size] += vb
    d[sa - start : sa - start + va.size] -= va
    return start, d


def _pad_sel(mod: SpectrumModel, start: int, stop: int):
    sel = (mod.pad_src >= start) & (mod.pad_src < stop)
    return mod.pad_pos[sel], mod.pad_src[sel] - start


def _delta_rss(mod: SpectrumModel, resid: np.ndarray, start: int, dfit: np.ndarray) -> float:
    """Change of the residual sum of squares when ``fit[start:...] += dfit``."""
    stop = start + dfit.size
    r = resid[start:stop]
    out = float(np.dot(dfit, dfit) - 2.0 * np.dot(r, dfit))
    pos, src = _pad_sel(mod, start, stop)
    if pos.size:
        dp = dfit[src]
        out += float(np.dot(dp, dp) - 2.0 * np.dot(resid[pos], dp))
    return out


def _apply_fit_delta(mod: SpectrumModel, st: ModelState, start: int, dfit: np.ndarray):
    stop = start + dfit.size
    st.fit[start:stop] += dfit
    st.resid[start:stop] -= dfit
    pos, src = _pad_sel(mod, start, stop)
    if pos.size:
        st.resid[pos] -= dfit[src]


def _shift_logprior(mod: SpectrumModel, u: int, x: float) -> float:
    if x < mod.shift_lo[u] or x > mod.shift_hi[u]:
        return -np.inf
    return -0.5 * ((x - mod.shift_mean[u]) / mod.shift_sd[u]) ** 2


def _tn_logmass(lo, hi, centre, sd):
    return truncnorm.log_mass((lo - centre) / sd, (hi - centre) / sd)


def _accept(rng, log_alpha: float) -> bool:
    if not log_alpha < 0.0:
        return bool(log_alpha == log_alpha)  # NaN rejects
    return math.log(rng.random()) < log_alpha


def _psi_term(st: ModelState, mod: SpectrumModel) -> float:
    return float(np.dot(mod.c, np.log(st.psi)))


# -- Gibbs --------------------------------------------------------------------


def gibbs_beta(chain: ChainState, models: Sequence[SpectrumModel]):
    kappa = 1.0 / chain.temperature
    states = chain.states
    beta = chain.beta
    rng = chain.rng
    M = models[0].M
    for m in range(M):
        prec = models[0].s[m]
        lin = models[0].s[m] * models[0].e[m]
        for st, mod in zip(states, models):
            col = st.cols[:, m]
            cp = col[mod.pad_src]
            tt = float(col @ col + cp @ cp)
            tr = float(col @ st.resid[: mod.n] + cp @ st.resid[mod.n :])
            prec += kappa * st.lam * tt
            lin += kappa * st.lam * (tr + beta[m] * tt)
        new = truncnorm.sample1(lin / prec, 1.0 / math.sqrt(prec), 0.0, np.inf, rng.random())
        d = new - beta[m]
        if d != 0.0:
            beta[m] = new
            for st, mod in zip(states, models):
                dcol = d * st.cols[:, m]
                st.fit += dcol
                st.resid[: mod.n] -= dcol
                st.resid[mod.n :] -= dcol[mod.pad_src]


def gibbs_wavelets(chain: ChainState, st: ModelState, mod: SpectrumModel):
    """theta, psi, tau and lambda for one spectrum."""
    T = chain.temperature
    kappa = 1.0 / T
    rng = chain.rng
    cfg = mod.config
    basis = mod.basis
    w = mod.plan.analyze(st.resid + st.xi)
    u = rng.random(mod.p)
    kernels.theta_sweep(st.theta, st.psi, w, st.xi, st.tau, st.lam, kappa, mod.n,
                        basis.indptr, basis.indices, basis.data, u)
    st.resid = mod.Y - mod.plan.extend(st.fit) - st.xi
    shape = mod.c * T + 0.5
    rate = 0.5 * (mod.d + st.lam * st.theta**2)
    st.psi = np.maximum(rng.gamma(shape, 1.0 / rate), 1e-300)
    sd = 1.0 / math.sqrt(st.lam * cfg.r)
    upper = np.minimum(cfg.h, st.xi_obs)
    st.tau = np.minimum(truncnorm.sample(rng, cfg.h, sd, -np.inf, upper), upper)
    a_shape = cfg.a + 0.5 * (mod.p + mod.n) + 0.5 * kappa * mod.p
    quad = (cfg.b + float(np.dot(st.psi, st.theta**2)) + cfg.r * float(np.sum((st.tau - cfg.h) ** 2))
            + kappa * float(np.dot(st.resid, st.resid)))
    st.lam = float(rng.gamma(a_shape, 2.0 / quad))


def gibbs_sweep(chain: ChainState, models: Sequence[SpectrumModel]) -> ChainState:
    gibbs_beta(chain, models)
    for st, mod in zip(chain.states, models):
        gibbs_wavelets(chain, st, mod)
    return chain


# -- single-site Metropolis ---------------------------------------------------


def mh_update_shift(chain: ChainState, models, s: int, u: int) -> bool:
    st, mod = chain.states[s], models[s]
    T = chain.temperature
    ad = chain.adapt["shift"][s]
    step = ad.step(u) * math.sqrt(T)
    cur = st.shifts[u]
    lo, hi = mod.shift_lo[u], mod.shift_hi[u]
    new = truncnorm.sample1(cur, step, lo, hi, chain.rng.random())
    m = int(mod.owner[u])
    start, dcol = _window_delta(mod, st, u, new)
    dfit = st.beta[m] * dcol
    log_alpha = (-0.5 * st.lam / T * _delta_rss(mod, st.resid, start, dfit)
                 + _shift_logprior(mod, u, new) - _shift_logprior(mod, u, cur)
                 + _tn_logmass(lo, hi, cur, step) - _tn_logmass(lo, hi, new, step))
    ok = _accept(chain.rng, log_alpha)
    if ok:
        st.shifts[u] = new
        st.cols[start : start + dcol.size, m] += dcol
        _apply_fit_delta(mod, st, start, dfit)
    ad.record(u, ok)
    chain.count("mh_shift", ok)
    return ok


def _logwidth_prior(mod: SpectrumModel, lg: float) -> float:
    # log-normal density of gamma expressed on the log scale (Jacobian included)
    return -0.5 * (lg - mod.gamma_mu) ** 2 / mod.gamma_s2


def mh_update_logwidth(chain: ChainState, models, s: int) -> bool:
    st, mod = chain.states[s], models[s]
    T = chain.temperature
    ad = chain.adapt["logwidth"][s]
    lg = math.log(st.gamma)
    lg_new = lg + ad.step(0) * math.sqrt(T) * chain.rng.standard_normal()
    cols = mod.template_matrix(math.exp(lg_new), st.shifts, st.re)
    fit = cols @ st.beta
    resid = mod.Y - mod.plan.extend(fit) - st.xi
    d_rss = float(resid @ resid) - float(st.resid @ st.resid)
    log_alpha = -0.5 * st.lam / T * d_rss + _logwidth_prior(mod, lg_new) - _logwidth_prior(mod, lg)
    ok = _accept(chain.rng, log_alpha)
    if ok:
        st.gamma = math.exp(lg_new)
        st.cols, st.fit, st.resid = cols, fit, resid
    ad.record(0, ok)
    chain.count("mh_logwidth", ok)
    return ok


def mh_update_re(chain: ChainState, models, s: int, m: int) -> bool:
    st, mod = chain.states[s], models[s]
    T = chain.temperature
    ad = chain.adapt["re"][s]
    cur = st.re[m]
    new = cur + ad.step(m) * math.sqrt(T) * chain.rng.standard_normal()
    col = mod.column(m, st.gamma, st.shifts, new)
    dfit = st.beta[m] * (col - st.cols[:, m])
    sd = mod.config.re_sd
    log_alpha = (-0.5 * st.lam / T * _delta_rss(mod, st.resid, 0, dfit)
                 - 0.5 * (new**2 - cur**2) / sd**2)
    ok = _accept(chain.rng, log_alpha)
    if ok:
        st.re[m] = new
        st.cols[:, m] = col
        _apply_fit_delta(mod, st, 0, dfit)
    ad.record(m, ok)
    chain.count("mh_re", ok)
    return ok


# -- block moves --------------------------------------------------------------


@dataclass
class ThetaProposal:
    log_ratio: float
    fit: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    resid: np.ndarray


def propose_theta_block(st: ModelState, mod: SpectrumModel, kappa: float, fit_new: np.ndarray,
                        rng: np.random.Generator | None = None, eta: np.ndarray | None = None) -> ThetaProposal:
    """Draw all wavelet coefficients given new template means.

    The local precisions ``psi`` are integrated out of the move: the ratio
    uses the marginal prior of ``theta`` given ``lam``, and an accepted move
    redraws ``psi`` from its full conditional (see ``_commit_theta``).
    ``log_ratio`` collects the tempered likelihood change, that prior change
    and the forward/reverse proposal densities; the caller adds the terms of
    whatever template parameter moved.
    """
    sd = 1.0 / math.sqrt(st.lam)
    mean_new = mod.Y - mod.plan.extend(fit_new)
    if eta is None:
        eta = np.empty(mod.p)
        kernels.eta_propose(mean_new, st.tau, sd, mod.n, rng.standard_normal(mod.p), rng.random(mod.p), eta)
    theta_new = mod.plan.analyze(eta)
    resid_new = mean_new - eta
    mean_old = st.resid + st.xi
    d_rss = float(resid_new @ resid_new) - float(st.resid @ st.resid)
    shape = mod.c / kappa + 0.5
    d_prior = -float(np.dot(shape, np.log(mod.d + st.lam * theta_new**2) - np.log(mod.d + st.lam * st.theta**2)))
    log_q = kernels.eta_logq(st.xi, mean_old, st.tau, sd, mod.n) - kernels.eta_logq(eta, mean_new, st.tau, sd, mod.n)
    log_ratio = -0.5 * kappa * st.lam * d_rss + d_prior + log_q
    return ThetaProposal(log_ratio, fit_new, eta, theta_new, resid_new)


def _commit_theta(st: ModelState, mod: SpectrumModel, prop: ThetaProposal, temperature: float, rng):
    st.fit = prop.fit
    st.xi = prop.eta
    st.theta = prop.theta
    st.resid = prop.resid
    rate = 0.5 * (mod.d + st.lam * st.theta**2)
    st.psi = np.maximum(rng.gamma(mod.c * temperature + 0.5, 1.0 / rate), 1e-300)


def shift_theta_proposal(chain: ChainState, models, s: int, u: int, new: float, eta=None):
    """Log acceptance ratio (without the shift proposal densities) of moving
    multiplet ``u`` to ``new`` together with a fresh draw of the wavelets."""
    st, mod = chain.states[s], models[s]
    m = int(mod.owner[u])
    start, dcol = _window_delta(mod, st, u, new)
    fit_new = st.fit.copy()
    fit_new[start : start + dcol.size] += st.beta[m] * dcol
    prop = propose_theta_block(st, mod, 1.0 / chain.temperature, fit_new, chain.rng, eta)
    log_alpha = prop.log_ratio + _shift_logprior(mod, u, new) - _shift_logprior(mod, u, st.shifts[u])
    return log_alpha, prop, (m, start, dcol)


def _shift_theta_move(chain: ChainState, models, s: int, u: int, new: float, log_extra: float,
                      move: str, eta=None) -> bool:
    st, mod = chain.states[s], models[s]
    log_alpha, prop, (m, start, dcol) = shift_theta_proposal(chain, models, s, u, new, eta)
    ok = _accept(chain.rng, log_alpha + log_extra)
    if ok:
        st.shifts[u] = new
        st.cols[start : start + dcol.size, m] += dcol
        _commit_theta(st, mod, prop, chain.temperature, chain.rng)
    chain.count(move, ok)
    return ok


def block_update_shift_theta(chain: ChainState, models, s: int, u: int, cfg: SamplerConfig,
                             new_shift: float | None = None, eta=None) -> bool:
    mod = models[s]
    cur = chain.states[s].shifts[u]
    lo, hi = mod.shift_lo[u], mod.shift_hi[u]
    sd = cfg.block_shift_sd
    new = truncnorm.sample1(cur, sd, lo, hi, chain.rng.random()) if new_shift is None else new_shift
    extra = _tn_logmass(lo, hi, cur, sd) - _tn_logmass(lo, hi, new, sd)
    return _shift_theta_move(chain, models, s, u, new, extra, "block_shift_theta", eta)


def _cauchy_cdf(x, c, s):
    return 0.5 + math.atan((x - c) / s) / math.pi


def _cauchy_logpdf(x, c, s):
    z = (x - c) / s
    return -math.log(math.pi * s * (1.0 + z * z))


def truncated_cauchy(rng, centre: float, scale: float, lo: float, hi: float) -> float:
    a = _cauchy_cdf(lo, centre, scale) if np.isfinite(lo) else 0.0
    b = _cauchy_cdf(hi, centre, scale) if np.isfinite(hi) else 1.0
    q = a + (b - a) * rng.random()
    x = centre + scale * math.tan(math.pi * (q - 0.5))
    return min(max(x, lo), hi)


def greedy_centre(states: Sequence[ModelState], models: Sequence[SpectrumModel], m: int,
                  kappa: float = 1.0) -> float:
    """Mode of the concentration conditional with the wavelets switched off,
    capped so that the data minus templates stays above ``tau``."""
    prec = models[0].s[m]
    lin = models[0].s[m] * models[0].e[m]
    cap = np.inf
    for st, mod in zip(states, models):
        col = st.cols[:, m]
        cmax = float(col.max()) if col.size else 0.0
        if cmax <= 0:
            continue
        rest = st.fit - st.beta[m] * col
        t = mod.plan.extend(col)
        prec += kappa * st.lam * float(t @ t)
        lin += kappa * st.lam * float(t @ (mod.Y - mod.plan.extend(rest)))
        sup = col > 1e-6 * cmax
        cap = min(cap, float(np.min((mod.y[sup] - rest[sup] - st.tau[sup]) / col[sup])))
    if not cap > 0:
        return 0.0
    return float(min(max(lin / prec, 0.0), cap))


def beta_theta_proposal(chain: ChainState, models, m: int, new: float, centre: float, scale: float, eta=None):
    """Log acceptance ratio of setting ``beta[m] = new`` with fresh wavelets
    in every spectrum; ``centre``/``scale`` define the Cauchy proposal."""
    states = chain.states
    kappa = 1.0 / chain.temperature
    cur = chain.beta[m]
    mod0 = models[0]
    log_alpha = (-0.5 * mod0.s[m] * ((new - mod0.e[m]) ** 2 - (cur - mod0.e[m]) ** 2)
                 + _cauchy_logpdf(cur, centre, scale) - _cauchy_logpdf(new, centre, scale))
    props = []
    for k, (st, mod) in enumerate(zip(states, models)):
        fit_new = st.fit + (new - cur) * st.cols[:, m]
        e = None if eta is None else eta[k]
        prop = propose_theta_block(st, mod, kappa, fit_new, chain.rng, e)
        log_alpha += prop.log_ratio
        props.append(prop)
    return log_alpha, props


def block_update_beta_theta(chain: ChainState, models, m: int, cfg: SamplerConfig, eta=None,
                            new_beta: float | None = None) -> bool:
    states = chain.states
    if all(float(np.abs(st.cols[:, m]).max(initial=0.0)) == 0.0 for st in states):
        chain.count("block_beta_theta", True)
        return True
    centre = greedy_centre(states, models, m, 1.0 / chain.temperature)
    scale = cfg.greedy_scale * centre + cfg.greedy_offset
    new = truncated_cauchy(chain.rng, centre, scale, 0.0, np.inf) if new_beta is None else new_beta
    log_alpha, props = beta_theta_proposal(chain, models, m, new, centre, scale, eta)
    ok = _accept(chain.rng, log_alpha)
    if ok:
        chain.beta[m] = new
        for st, mod, prop in zip(states, models, props):
            _commit_theta(st, mod, prop, chain.temperature, chain.rng)
    chain.count("block_beta_theta", ok)
    return ok


# -- population moves ---------------------------------------------------------


class Population:
    def __init__(self, chains: list, ratios: np.ndarray, rng: np.random.Generator):
        self.chains = chains
        self.ratios = np.asarray(ratios, dtype=float)
        self.rng = rng

    def __len__(self):
        return len(self.chains)

    def set_base_temperature(self, t0: float):
        for ch, r in zip(self.chains, self.ratios):
            ch.temperature = t0 * r


def tempered_parts(chain: ChainState, models) -> tuple:
    """(log-likelihood, sum of c_j log psi) summed over spectra."""
    L = sum(log_likelihood(st, mod) for st, mod in zip(chain.states, models))
    C = sum(_psi_term(st, mod) for st, mod in zip(chain.states, models))
    return L, C


def exchange_log_ratio(a: ChainState, b: ChainState, models) -> float:
    La, Ca = tempered_parts(a, models)
    Lb, Cb = tempered_parts(b, models)
    Ta, Tb = a.temperature, b.temperature
    return (1.0 / Ta - 1.0 / Tb) * (Lb - La) + (Ta - Tb) * (Cb - Ca)


def exchange_move(pop: Population, i: int, models) -> bool:
    a, b = pop.chains[i], pop.chains[i + 1]
    ok = _accept(pop.rng, exchange_log_ratio(a, b, models))
    if ok:
        a.states, b.states = b.states, a.states
    a.count("exchange", ok)
    return ok


def copy_move(pop: Population, k: int, s: int, u: int, models, cfg: SamplerConfig, eta=None) -> bool:
    if len(pop) < 2:
        raise ConfigurationError("copy moves need at least two chains")
    chain = pop.chains[k]
    others = [j for j in range(len(pop)) if j != k]
    j = others[int(chain.rng.integers(len(others)))]
    mod = models[s]
    centre = pop.chains[j].states[s].shifts[u]
    cur = chain.states[s].shifts[u]
    new = truncated_cauchy(chain.rng, centre, cfg.copy_scale, mod.shift_lo[u], mod.shift_hi[u])
    extra = _cauchy_logpdf(cur, centre, cfg.copy_scale) - _cauchy_logpdf(new, centre, cfg.copy_scale)
    return _shift_theta_move(chain, models, s, u, new, extra, "copy", eta)


# -- bookkeeping --------------------------------------------------------------


def refresh_chain(chain: ChainState, models, tol: float = 1e-8):
    """Recompute caches; returns the largest cache discrepancy relative to
    the data scale."""
    worst = 0.0
    for st, mod in zip(chain.states, models):
        scale = max(float(np.abs(mod.y).max()), 1e-300)
        old = (st.fit.copy(), st.xi.copy(), st.resid.copy())
        st.refresh(mod)
        for a, b in zip(old, (st.fit, st.xi, st.resid)):
            worst = max(worst, float(np.max(np.abs(a - b))) / scale)
        # rounding in the incremental updates can leave tau a hair above xi
        st.tau = np.minimum(st.tau, st.xi_obs)
    return worst


def _dump(chain: ChainState, models) -> dict:
    out = {"temperature": chain.temperature, "slot": chain.slot}
    for s, st in enumerate(chain.states):
        out[f"spectrum{s}"] = {
            "beta": st.beta.tolist(), "gamma": st.gamma, "lambda": st.lam,
            "shifts": st.shifts.tolist(), "re": st.re.tolist(),
            "psi_range": [float(np.min(st.psi)), float(np.max(st.psi))],
            "theta_finite": bool(np.all(np.isfinite(st.theta))),
        }
    return out


def check_chain(chain: ChainState, models):
    lp = multi_spectrum_log_posterior(chain.states, models, chain.temperature)
    if not np.isfinite(lp):
        raise ChainFault(f"chain in slot {chain.slot} left the support (log-posterior {lp})", _dump(chain, models))
    return lp


@dataclass
class SampleLog:
    """Post-burn-in draws of chain 0 plus per-iteration diagnostics."""

    metabolites: list
    multiplet_labels: list
    n_spectra: int
    iterations: np.ndarray
    beta: np.ndarray
    shifts: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    re: np.ndarray
    log_posterior: np.ndarray
    temperature: np.ndarray
    acceptance: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return int(self.iterations.size)

    def columns(self) -> list:
        cols = ["iteration"] + [f"beta:{n}" for n in self.metabolites]
        multi = self.n_spectra > 1
        for s in range(self.n_spectra):
            tag = f"[{s}]" if multi else ""
            cols += [f"shift{tag}:{lab}" for lab in self.multiplet_labels]
        for s in range(self.n_spectra):
            tag = f"[{s}]" if multi else ""
            cols += [f"gamma{tag}", f"lambda{tag}"]
        cols.append("log_posterior")
        return cols

    def table(self) -> np.ndarray:
        d = self.n_draws
        lp = self.log_posterior[self.iterations] if d else np.zeros(0)
        parts = [self.iterations[:, None].astype(float), self.beta, self.shifts.reshape(d, -1)]
        for s in range(self.n_spectra):
            parts += [self.gamma[:, s : s + 1], self.lam[:, s : s + 1]]
        parts.append(lp[:, None])
        return np.hstack(parts)

    def acceptance_rates(self) -> dict:
        out = {}
        for row in self.acceptance:
            if row["slot"] == 0 and row["tried"]:
                out[row["move"]] = row["accepted"] / row["tried"]
        return out


def effective_size(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(x @ x) / n
    if var <= 0:
        return float(n)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / n)
    return float(min(n / tau, n))


@dataclass
class PosteriorSummary:
    metabolites: list
    multiplet_labels: list
    beta: dict
    shifts: list
    gamma: np.ndarray
    noise_sd: np.ndarray
    xi_mean: list
    fitted_templates: list

    def beta_table(self, factor: float = 1.0) -> list:
        rows = []
        for m, name in enumerate(self.metabolites):
            rows.append({
                "metabolite": name,
                "mean": self.beta["mean"][m] * factor,
                "sd": self.beta["sd"][m] * factor,
                "q2.5": self.beta["q2.5"][m] * factor,
                "q97.5": self.beta["q97.5"][m] * factor,
                "ess": self.beta["ess"][m],
            })
        return rows


def _stats(draws: np.ndarray) -> dict:
    if draws.shape[0] == 0:
        nan = np.full(draws.shape[1:], np.nan)
        return {"mean": nan, "sd": nan, "q2.5": nan, "q97.5": nan, "ess": nan}
    flat = draws.reshape(draws.shape[0], -1)
    return {
        "mean": flat.mean(axis=0).reshape(draws.shape[1:]),
        "sd": (flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1])).reshape(draws.shape[1:]),
        "q2.5": np.quantile(flat, 0.025, axis=0).reshape(draws.shape[1:]),
        "q97.5": np.quantile(flat, 0.975, axis=0).reshape(draws.shape[1:]),
        "ess": np.array([effective_size(flat[:, j]) for j in range(flat.shape[1])]).reshape(draws.shape[1:]),
    }


def summarize(log: SampleLog, models, xi_sums, n_sum: int) -> PosteriorSummary:
    beta = _stats(log.beta)
    shifts = [_stats(log.shifts[:, s, :]) for s in range(log.n_spectra)]
    gamma = log.gamma.mean(axis=0)
    noise = (1.0 / np.sqrt(log.lam)).mean(axis=0)
    xi_mean = [x / max(n_sum, 1) for x in xi_sums]
    fitted = []
    for s, mod in enumerate(models):
        re = log.re[:, s, :].mean(axis=0)
        cols = mod.template_matrix(float(gamma[s]), shifts[s]["mean"], re)
        fitted.append(cols * beta["mean"][None, :])
    return PosteriorSummary(log.metabolites, log.multiplet_labels, beta, shifts, gamma, noise, xi_mean, fitted)


def multiplet_labels(catalog: SignatureCatalog) -> list:
    labels = []
    for t in catalog.templates:
        for j in range(len(t.multiplets)):
            labels.append(f"{t.name}#{j}")
    return labels


# -- driver -------------------------------------------------------------------


def _check_overlap(models):
    for mod in models:
        x = mod.spectrum.x
        inside = (mod.shift_hi >= x[0]) & (mod.shift_lo <= x[-1])
        if not inside.any():
            raise ConfigurationError("no catalog multiplet lies within the spectral range")


def _initial_states(models, cfg: SamplerConfig, t0: float) -> list:
    if cfg.warm_start:
        located = [locate(mod) for mod in models]
        beta = np.mean([b for _, _, b in located], axis=0)
        states = [wavelet_start(mod, beta, g, sh, t0) for mod, (g, sh, _) in zip(models, located)]
    else:
        states = [initial_state(mod) for mod in models]
    for st in states[1:]:
        st.beta = states[0].beta
    for st, mod in zip(states, models):
        st.refresh(mod)
        st.tau = np.minimum(st.tau, np.minimum(mod.config.h, st.xi_obs))
    return states


def build_population(models, cfg: SamplerConfig, seed: int) -> Population:
    t0 = anneal_temperature(0, cfg.t_start, cfg.burnin, cfg.anneal_mu, cfg.anneal_sigma) if cfg.anneal else 1.0
    states = _initial_states(models, cfg, t0)
    steps = [initial_steps(st, mod) for st, mod in zip(states, models)]
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(cfg.chains + 1)
    ratios = ladder_ratios(cfg.chains, cfg.ladder_max)
    chains = []
    for k in range(cfg.chains):
        adapt = {
            "shift": [AdaptiveStep(sh, cfg.adapt_batch, cfg.target_accept) for sh, _, _ in steps],
            "logwidth": [AdaptiveStep([lw], cfg.adapt_batch, cfg.target_accept) for _, lw, _ in steps],
            "re": [AdaptiveStep(rs, cfg.adapt_batch, cfg.target_accept) for _, _, rs in steps],
        }
        chains.append(ChainState(copy_states(states), t0 * ratios[k], np.random.default_rng(children[k]), adapt, k))
    return Population(chains, ratios, np.random.default_rng(children[-1]))


def iterate(pop: Population, models, cfg: SamplerConfig):
    """One full iteration of every chain plus the population moves."""
    random_effects = models[0].config.random_effects
    for chain in pop.chains:
        gibbs_sweep(chain, models)
        for s, mod in enumerate(models):
            for u in range(mod.U):
                mh_update_shift(chain, models, s, u)
            mh_update_logwidth(chain, models, s)
            if random_effects:
                for m in range(mod.M):
                    mh_update_re(chain, models, s, m)
        if cfg.block_moves:
            for s, mod in enumerate(models):
                for u in range(mod.U):
                    block_update_shift_theta(chain, models, s, u, cfg)
            for m in range(models[0].M):
                block_update_beta_theta(chain, models, m, cfg)
    if len(pop) > 1:
        for k in range(len(pop)):
            for s, mod in enumerate(models):
                for u in range(mod.U):
                    copy_move(pop, k, s, u, models, cfg)
        for i in range(len(pop) - 1):
            exchange_move(pop, i, models)


def run(spectra, catalog: SignatureCatalog, prior: PriorConfig | None = None,
        sampler: SamplerConfig | None = None, seed: int | None = None,
        callback: Callable | None = None):
    """Fit one spectrum or a set sharing concentrations.

    Returns ``(SampleLog, PosteriorSummary, seed)``. Given the same inputs and
    seed the draws are bit-identical.
    """
    sset: SpectrumSet = as_spectrum_set(spectra)
    prior = prior or PriorConfig()
    cfg = sampler or SamplerConfig()
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
    models = [SpectrumModel(sp, catalog, prior) for sp in sset]
    _check_overlap(models)
    pop = build_population(models, cfg, seed)
    S, U, M = len(models), models[0].U, models[0].M
    D = cfg.n_draws
    iters = np.zeros(D, dtype=np.int64)
    beta = np.zeros((D, M))
    shifts = np.zeros((D, S, U))
    gamma = np.zeros((D, S))
    lam = np.zeros((D, S))
    re = np.zeros((D, S, M))
    lp_trace = np.zeros(cfg.iterations)
    t_trace = np.zeros(cfg.iterations)
    xi_sums = [np.zeros(mod.n) for mod in models]
    n_sum = 0
    d = 0
    for i in range(cfg.iterations):
        t0 = anneal_temperature(i, cfg.t_start, cfg.burnin, cfg.anneal_mu, cfg.anneal_sigma) if cfg.anneal else 1.0
        pop.set_base_temperature(t0)
        if i == cfg.burnin:
            for ch in pop.chains:
                for group in ch.adapt.values():
                    for ad in group:
                        ad.frozen = True
        iterate(pop, models, cfg)
        if cfg.refresh_every and (i + 1) % cfg.refresh_every == 0:
            for ch in pop.chains:
                refresh_chain(ch, models)
                check_chain(ch, models)
        chain0 = pop.chains[0]
        lp = multi_spectrum_log_posterior(chain0.states, models, 1.0)
        if not np.isfinite(lp):
            raise ChainFault(f"target chain left the support at iteration {i}", _dump(chain0, models))
        lp_trace[i] = lp
        t_trace[i] = chain0.temperature
        if i >= cfg.burnin:
            for s, st in enumerate(chain0.states):
                xi_sums[s] += st.xi_obs
            n_sum += 1
            if (i - cfg.burnin + 1) % cfg.thin == 0:
                iters[d] = i
                beta[d] = chain0.beta
                for s, st in enumerate(chain0.states):
                    shifts[d, s] = st.shifts
                    gamma[d, s] = st.gamma
                    lam[d, s] = st.lam
                    re[d, s] = st.re
                d += 1
        if callback is not None:
            callback(i, pop)
    acceptance = []
    for ch in pop.chains:
        for move, (acc, tried) in ch.counts.items():
            acceptance.append({"slot": ch.slot, "move": move, "accepted": acc, "tried": tried,
                               "rate": acc / tried if tried else float("nan")})
    log = SampleLog(catalog.names, multiplet_labels(catalog), S, iters, beta, shifts, gamma, lam, re,
                    lp_trace, t_trace, acceptance)
    return log, summarize(log, models, xi_sums, n_sum), seed
