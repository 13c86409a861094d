import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nmrbayes import kernels, mcmc, truncnorm
from nmrbayes import posterior as P
from nmrbayes.spectrum import ChemicalShiftGrid, Spectrum, SpectrumSet
from nmrbayes.templates import build_template_matrix, load_bundled_catalog

GAMMA0 = 1.5 / 600


def _singlet_model(noise=1e-3, beta=1e-4, shifts=(1.912,), prior=None, n=256, seed=0, lo=1.80, hi=2.02):
    cat = load_bundled_catalog().subset(["acetate"])
    grid = ChemicalShiftGrid.regular(lo, hi, n)
    rng = np.random.default_rng(seed)
    y = sum(beta * build_template_matrix(cat, GAMMA0, [s], None, grid).values[:, 0] for s in shifts)
    y = y + rng.normal(0, noise, n) if noise else y
    return P.SpectrumModel(Spectrum(grid, y), cat, prior)


def _chain(models, seed=0, temperature=1.0, **kw):
    cfg = mcmc.SamplerConfig(iterations=2, burnin=1, chains=1, anneal=False, **kw)
    pop = mcmc.build_population(models, cfg, seed)
    ch = pop.chains[0]
    ch.temperature = temperature
    return ch, cfg


def _burn(ch, models, iters=200):
    for _ in range(iters):
        mcmc.gibbs_sweep(ch, models)
        for s, mod in enumerate(models):
            for u in range(mod.U):
                mcmc.mh_update_shift(ch, models, s, u)
            mcmc.mh_update_logwidth(ch, models, s)
    return ch


def _clone(ch, seed):
    states = mcmc.copy_states(ch.states)
    adapt = {k: [a.copy() for a in v] for k, v in ch.adapt.items()}
    return mcmc.ChainState(states, ch.temperature, np.random.default_rng(seed), adapt, ch.slot)


def _uniform_ok(u, p=0.01):
    return stats.kstest(np.asarray(u), "uniform").pvalue > p


# -- schedule and configuration ------------------------------------------------


def test_anneal_schedule():
    assert mcmc.anneal_temperature(0, 32, 3000) == pytest.approx(32)
    ts = [mcmc.anneal_temperature(i, 32, 3000) for i in range(3001)]
    assert np.all(np.diff(ts) <= 1e-12)
    assert ts[2999] <= 1.01 and ts[3000] == 1.0
    assert mcmc.anneal_temperature(10**7, 32, 3000) == 1.0
    assert mcmc.anneal_temperature(5, 1.0, 3000) == 1.0
    with pytest.raises(ValueError):
        mcmc.anneal_temperature(-1, 32, 3000)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.floats(1.5, 100))
def test_ladder_is_geometric(k, top):
    r = mcmc.ladder_ratios(k, top)
    assert r[0] == 1.0 and r[-1] == pytest.approx(top)
    assert np.all(np.diff(r) > 0)
    np.testing.assert_allclose(r[1:] / r[:-1], r[1] / r[0])


def test_sampler_config():
    cfg = mcmc.SamplerConfig(iterations=100, burnin=40, thin=7)
    assert cfg.n_draws == 8
    assert mcmc.SamplerConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(iterations=10, burnin=10), dict(chains=0), dict(t_start=0.5), dict(thin=0)):
        with pytest.raises(mcmc.ConfigurationError):
            mcmc.SamplerConfig(**bad)


def test_adaptive_step_rule_and_freeze():
    ad = mcmc.AdaptiveStep([0.1], batch=50, target=0.44)
    for _ in range(50):
        ad.record(0, True)
    assert ad.step(0) == pytest.approx(0.1 * math.exp(0.01))
    for _ in range(50):
        ad.record(0, False)
    assert ad.step(0) == pytest.approx(0.1)
    ad.frozen = True
    for _ in range(500):
        ad.record(0, True)
    assert ad.step(0) == pytest.approx(0.1)
    assert ad.tried[0] == 600 and ad.accepted[0] == 550


# -- Gibbs kernels: each draw follows its full conditional ---------------------


@pytest.fixture(scope="module")
def burned():
    mod = _singlet_model()
    ch, _ = _chain([mod], seed=1)
    _burn(ch, [mod], 150)
    return mod, ch


@pytest.mark.parametrize("T", [1.0, 3.0])
def test_gibbs_beta_draws_follow_conditional(burned, T):
    mod, ch = burned
    ch.temperature = T
    cond = P.beta_conditional(ch.states, [mod], 0, T)
    u = []
    for r in range(3000):
        c = _clone(ch, r)
        mcmc.gibbs_beta(c, [mod])
        u.append(stats.truncnorm.cdf(c.beta[0], (0 - cond.params["mean"]) / cond.params["sd"], np.inf,
                                     loc=cond.params["mean"], scale=cond.params["sd"]))
    ch.temperature = 1.0
    assert _uniform_ok(u)


@pytest.mark.parametrize("T", [1.0, 2.0])
def test_gibbs_wavelet_block_draws_follow_conditionals(burned, T):
    mod, ch = burned
    ch.temperature = T
    st0 = ch.states[0]
    lam0 = st0.lam
    first = P.full_conditional_params(st0, mod, "theta", 0, T)
    k, i = 37, 11
    pit = {"theta": [], "psi": [], "tau": [], "lam": []}
    for r in range(1500):
        c = _clone(ch, 100 + r)
        st_ = c.states[0]
        mcmc.gibbs_wavelets(c, st_, mod)
        p = first.params
        pit["theta"].append(np.exp(truncnorm.log_mass((p["lo"] - p["mean"]) / p["sd"],
                                                      (st_.theta[0] - p["mean"]) / p["sd"])
                                   - truncnorm.log_mass((p["lo"] - p["mean"]) / p["sd"],
                                                        (p["hi"] - p["mean"]) / p["sd"])))
        shape = mod.c[k] * T + 0.5
        pit["psi"].append(stats.gamma.cdf(st_.psi[k], shape, scale=2.0 / (mod.d[k] + lam0 * st_.theta[k] ** 2)))
        up = min(mod.config.h, st_.xi[i])
        sd = 1 / math.sqrt(lam0 * mod.config.r)
        pit["tau"].append(stats.norm.cdf(st_.tau[i], mod.config.h, sd) / stats.norm.cdf(up, mod.config.h, sd))
        lc = P.full_conditional_params(st_, mod, "lam", 0, T)
        pit["lam"].append(stats.gamma.cdf(st_.lam, lc.params["shape"], scale=1 / lc.params["rate"]))
    ch.temperature = 1.0
    for name, vals in pit.items():
        assert _uniform_ok(vals), name


def test_sweeps_keep_truncation_invariant():
    mod = _singlet_model(noise=2e-3)
    ch, _ = _chain([mod], seed=2)
    for it in range(1000):
        mcmc.gibbs_sweep(ch, [mod])
        st_ = ch.states[0]
        assert np.all(st_.tau <= mod.config.h)
        assert np.all(st_.tau <= st_.xi_obs)
        if it % 100 == 0:
            assert np.isfinite(P.log_posterior(st_, mod))
            assert st_.cache_error(mod) < 1e-9 * max(1.0, np.abs(mod.y).max())


def test_theta_sweep_respects_interval_edges():
    # one coefficient whose interval is a single point stays put
    theta = np.array([0.5])
    xi = np.array([1.0])
    tau = np.array([1.0])
    kernels.theta_sweep(theta, np.ones(1), np.zeros(1), xi, tau, 1.0, 1.0, 1,
                        np.array([0, 1]), np.array([0]), np.array([1.0]), np.array([0.3]))
    assert theta[0] >= 0.5 and xi[0] >= tau[0]


# -- Metropolis kernels -----------------------------------------------------------


def _slice_density(values, logf):
    lp = np.array([logf(v) for v in values])
    w = np.exp(lp - lp.max())
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


def test_shift_kernel_preserves_its_slice(burned):
    mod, ch = burned
    st0 = ch.states[0]
    lo, hi = mod.shift_lo[0], mod.shift_hi[0]
    centre = st0.shifts[0]
    width = 6 * ch.adapt["shift"][0].step(0)
    grid = np.linspace(max(lo, centre - width), min(hi, centre + width), 4001)

    def logf(v):
        s = st0.copy()
        s.shifts[0] = v
        s.refresh(mod)
        return P.log_posterior(s, mod)

    cdf = _slice_density(grid, logf)
    rng = np.random.default_rng(5)
    out = []
    for r in range(2000):
        start = np.interp(rng.random(), cdf, grid)
        c = _clone(ch, 1000 + r)
        s = c.states[0]
        s.shifts[0] = start
        s.refresh(mod)
        mcmc.mh_update_shift(c, [mod], 0, 0)
        out.append(np.interp(s.shifts[0], grid, cdf))
    assert _uniform_ok(out)


def test_logwidth_kernel_preserves_its_slice(burned):
    mod, ch = burned
    st0 = ch.states[0]
    lg0 = math.log(st0.gamma)
    width = 6 * ch.adapt["logwidth"][0].step(0)
    grid = np.linspace(lg0 - width, lg0 + width, 4001)

    def logf(v):
        s = st0.copy()
        s.gamma = math.exp(v)
        s.refresh(mod)
        # density of log(gamma): add the Jacobian
        return P.log_posterior(s, mod) + v

    cdf = _slice_density(grid, logf)
    rng = np.random.default_rng(6)
    out = []
    for r in range(2000):
        start = np.interp(rng.random(), cdf, grid)
        c = _clone(ch, 5000 + r)
        s = c.states[0]
        s.gamma = math.exp(start)
        s.refresh(mod)
        mcmc.mh_update_logwidth(c, [mod], 0)
        assert s.gamma > 0
        out.append(np.interp(math.log(s.gamma), grid, cdf))
    assert _uniform_ok(out)


def test_random_effect_kernel_preserves_its_slice():
    mod = _singlet_model(prior=P.PriorConfig(random_effects=True, re_sd=0.05))
    ch, _ = _chain([mod], seed=3)
    _burn(ch, [mod], 100)
    for _ in range(200):
        mcmc.mh_update_re(ch, [mod], 0, 0)
    st0 = ch.states[0]
    width = 6 * ch.adapt["re"][0].step(0)
    grid = np.linspace(st0.re[0] - width, st0.re[0] + width, 4001)

    def logf(v):
        s = st0.copy()
        s.re[0] = v
        s.refresh(mod)
        return P.log_posterior(s, mod)

    cdf = _slice_density(grid, logf)
    rng = np.random.default_rng(7)
    out = []
    for r in range(2000):
        c = _clone(ch, 9000 + r)
        s = c.states[0]
        s.re[0] = np.interp(rng.random(), cdf, grid)
        s.refresh(mod)
        mcmc.mh_update_re(c, [mod], 0, 0)
        out.append(np.interp(s.re[0], grid, cdf))
    assert _uniform_ok(out)


def test_shift_proposals_stay_in_prior_window():
    mod = _singlet_model()
    ch, _ = _chain([mod], seed=4)
    st0 = ch.states[0]
    st0.shifts[0] = mod.shift_hi[0]
    st0.refresh(mod)
    ch.adapt["shift"][0].log_step[0] = math.log(0.5)
    for _ in range(300):
        mcmc.mh_update_shift(ch, [mod], 0, 0)
        assert mod.shift_lo[0] <= st0.shifts[0] <= mod.shift_hi[0]


def test_shift_adaptation_reaches_target():
    mod = _singlet_model()
    ch, _ = _chain([mod], seed=5)
    _burn(ch, [mod], 50)
    ad = ch.adapt["shift"][0]
    # 10^4 updates move the log step by at most 2
    ad.log_step[0] += math.log(4.0)
    for _ in range(10000):
        mcmc.mh_update_shift(ch, [mod], 0, 0)
    before = (ad.accepted[0], ad.tried[0])
    for _ in range(2000):
        mcmc.mh_update_shift(ch, [mod], 0, 0)
    rate = (ad.accepted[0] - before[0]) / (ad.tried[0] - before[1])
    assert 0.34 <= rate <= 0.54


def test_logwidth_adaptation_reaches_target():
    mod = _singlet_model()
    ch, _ = _chain([mod], seed=6)
    _burn(ch, [mod], 50)
    ad = ch.adapt["logwidth"][0]
    ad.log_step[0] += math.log(4.0)
    for _ in range(10000):
        mcmc.mh_update_logwidth(ch, [mod], 0)
    before = (ad.accepted[0], ad.tried[0])
    for _ in range(2000):
        mcmc.mh_update_logwidth(ch, [mod], 0)
    rate = (ad.accepted[0] - before[0]) / (ad.tried[0] - before[1])
    assert 0.34 <= rate <= 0.54


def test_logwidth_recovers_prior_without_likelihood():
    mod = _singlet_model()
    ch, _ = _chain([mod], seed=7)
    st0 = ch.states[0]
    st0.beta[:] = 0.0
    st0.refresh(mod)
    ch.adapt["logwidth"][0].log_step[0] = math.log(2.4 * math.sqrt(mod.gamma_s2))
    draws = []
    for _ in range(20000):
        mcmc.mh_update_logwidth(ch, [mod], 0)
        draws.append(math.log(st0.gamma))
    x = np.array(draws[1000:])
    ess = mcmc.effective_size(x)
    se_mean = math.sqrt(mod.gamma_s2 / ess)
    assert abs(x.mean() - mod.gamma_mu) < 3 * se_mean
    # variance of a normal sample: sd of the estimate is about s2 * sqrt(2 / ess)
    assert abs(x.var() - mod.gamma_s2) < 3 * mod.gamma_s2 * math.sqrt(2 / ess)


# -- block moves ----------------------------------------------------------------


def _marginal_log_target(st_, mod, T):
    """Log posterior with the local precisions integrated out (block-move target)."""
    cfg = mod.config
    lp = P.log_posterior(st_, mod, T)
    psi_part = float(np.sum((mod.c * T - 0.5) * np.log(st_.psi) - 0.5 * st_.psi * mod.d)
                     - 0.5 * st_.lam * np.dot(st_.psi, st_.theta**2))
    shape = mod.c * T + 0.5
    marg = float(np.sum(-shape * np.log(mod.d + st_.lam * st_.theta**2)))
    return lp - psi_part + marg


def _eta_logq(eta, mean, tau, sd, n):
    obs = stats.truncnorm.logpdf(eta[:n], (tau - mean[:n]) / sd, np.inf, loc=mean[:n], scale=sd).sum()
    return obs + stats.norm.logpdf(eta[n:], mean[n:], sd).sum()


@pytest.mark.parametrize("T", [1.0, 2.5])
def test_block_shift_ratio_is_exact_and_reversible(T):
    prior = P.PriorConfig(d=1e4)
    mod = _singlet_model(noise=5e-3, shifts=(1.90, 1.92), prior=prior)
    ch, cfg = _chain([mod], seed=8, temperature=T)
    _burn(ch, [mod], 100)
    st0 = ch.states[0]
    cur = st0.shifts[0]
    for r, new in enumerate([cur + 0.0003, cur - 0.004, 1.92 if cur < 1.91 else 1.90]):
        c = _clone(ch, r)
        log_a, prop, (m, start, dcol) = mcmc.shift_theta_proposal(c, [mod], 0, 0, new)
        s_new = c.states[0].copy()
        s_new.shifts[0] = new
        s_new.theta = prop.theta
        s_new.refresh(mod)
        sd = 1 / math.sqrt(st0.lam)
        fwd = _eta_logq(prop.eta, mod.Y - mod.plan.extend(s_new.fit), st0.tau, sd, mod.n)
        rev = _eta_logq(st0.xi, mod.Y - mod.plan.extend(st0.fit), st0.tau, sd, mod.n)
        expect = _marginal_log_target(s_new, mod, T) - _marginal_log_target(st0, mod, T) + rev - fwd
        assert log_a == pytest.approx(expect, abs=1e-6 * max(1.0, abs(expect)))
        # the reverse move from the proposed state back to the current one
        back = _clone(ch, 50 + r)
        bs = back.states[0]
        bs.shifts[0], bs.theta = new, prop.theta.copy()
        bs.refresh(mod)
        log_b, _, _ = mcmc.shift_theta_proposal(back, [mod], 0, 0, cur, eta=st0.xi.copy())
        assert log_a + log_b == pytest.approx(0.0, abs=1e-6 * max(1.0, abs(log_a)))


def test_block_beta_ratio_is_reversible():
    prior = P.PriorConfig(d=1e4)
    mod = _singlet_model(noise=5e-3, prior=prior)
    ch, cfg = _chain([mod], seed=9)
    _burn(ch, [mod], 100)
    st0 = ch.states[0]
    cur = st0.beta[0]
    centre = mcmc.greedy_centre(ch.states, [mod], 0)
    scale = cfg.greedy_scale * centre + cfg.greedy_offset
    new = cur * 1.02
    log_a, props = mcmc.beta_theta_proposal(_clone(ch, 1), [mod], 0, new, centre, scale)
    back = _clone(ch, 2)
    bs = back.states[0]
    bs.beta[0], bs.theta = new, props[0].theta.copy()
    bs.refresh(mod)
    # the greedy centre does not depend on beta[m] or theta
    assert mcmc.greedy_centre(back.states, [mod], 0) == pytest.approx(centre, rel=1e-12)
    log_b, _ = mcmc.beta_theta_proposal(back, [mod], 0, cur, centre, scale, eta=[st0.xi.copy()])
    assert log_a + log_b == pytest.approx(0.0, abs=1e-6 * max(1.0, abs(log_a)))


def test_block_null_moves_are_always_accepted():
    mod = _singlet_model()
    ch, cfg = _chain([mod], seed=10)
    _burn(ch, [mod], 50)
    st0 = ch.states[0]
    log_a, _, _ = mcmc.shift_theta_proposal(ch, [mod], 0, 0, st0.shifts[0], eta=st0.xi.copy())
    assert log_a == pytest.approx(0.0, abs=1e-9)
    for _ in range(20):
        assert mcmc.block_update_shift_theta(ch, [mod], 0, 0, cfg, new_shift=st0.shifts[0], eta=st0.xi.copy())
        assert mcmc.block_update_beta_theta(ch, [mod], 0, cfg, eta=[st0.xi.copy()], new_beta=st0.beta[0])


def test_accepted_block_moves_stay_feasible():
    prior = P.PriorConfig(d=1e4)
    mod = _singlet_model(noise=5e-3, shifts=(1.90, 1.92), prior=prior)
    ch, cfg = _chain([mod], seed=11, block_shift_sd=0.02)
    accepted = 0
    for _ in range(400):
        accepted += mcmc.block_update_shift_theta(ch, [mod], 0, 0, cfg)
        accepted += mcmc.block_update_beta_theta(ch, [mod], 0, cfg)
        mcmc.gibbs_sweep(ch, [mod])
        st_ = ch.states[0]
        assert np.all(st_.xi_obs >= st_.tau)
        assert np.isfinite(P.log_posterior(st_, mod))
    assert accepted > 0
    assert ch.states[0].cache_error(mod) < 1e-9


def _count_transitions(mod, block, seed, iters):
    ch, cfg = _chain([mod], seed=seed, block_shift_sd=0.02)
    side = np.sign(ch.states[0].shifts[0] - 1.91)
    moves = 0
    for _ in range(iters):
        mcmc.gibbs_sweep(ch, [mod])
        mcmc.mh_update_shift(ch, [mod], 0, 0)
        mcmc.mh_update_logwidth(ch, [mod], 0)
        if block:
            mcmc.block_update_shift_theta(ch, [mod], 0, 0, cfg)
        x = ch.states[0].shifts[0]
        if np.sign(x - 1.91) != side and abs(x - 1.91) > 0.005:
            moves += 1
            side = -side
    return moves


@pytest.mark.slow
def test_block_moves_cross_between_wells():
    # two identical peaks; the template can explain either one
    mod = _singlet_model(noise=5e-3, shifts=(1.90, 1.92), prior=P.PriorConfig(d=1e4))
    single = _count_transitions(mod, False, 1, 10000)
    block = _count_transitions(mod, True, 1, 10000)
    assert block >= 10 * max(single, 1)


def test_greedy_centre_exact_fit():
    cat = load_bundled_catalog().subset(["acetate"])
    grid = ChemicalShiftGrid.regular(1.80, 2.02, 256)
    beta_star = 3e-4
    col = build_template_matrix(cat, GAMMA0, [1.91], None, grid).values[:, 0]
    mod = P.SpectrumModel(Spectrum(grid, beta_star * col), cat, P.PriorConfig(h=-1e6))
    st_ = P.initial_state(mod, beta=[0.0], lam=1e12, gamma=GAMMA0, shifts=[1.91])
    st_.tau[:] = -1e6
    assert mcmc.greedy_centre([st_], [mod], 0) == pytest.approx(beta_star, rel=1e-8)


def test_greedy_centre_capped_and_infeasible():
    cat = load_bundled_catalog().subset(["acetate"])
    grid = ChemicalShiftGrid.regular(1.80, 2.02, 256)
    col = build_template_matrix(cat, GAMMA0, [1.91], None, grid).values[:, 0]
    mod = P.SpectrumModel(Spectrum(grid, 1e-4 * col), cat)
    st_ = P.initial_state(mod, beta=[0.0], lam=1e12, gamma=GAMMA0, shifts=[1.91])
    st_.tau[:] = 0.5 * mod.y.max()
    # the data peak cannot stay above tau: no feasible positive concentration
    assert mcmc.greedy_centre([st_], [mod], 0) == 0.0


def test_zero_column_block_is_a_no_op():
    cat = load_bundled_catalog().subset(["acetate", "creatinine"])
    grid = ChemicalShiftGrid.regular(1.80, 2.02, 256)
    y = 1e-4 * build_template_matrix(cat.subset(["acetate"]), GAMMA0, [1.91], None, grid).values[:, 0]
    mod = P.SpectrumModel(Spectrum(grid, y + 1e-3), cat)
    ch, cfg = _chain([mod], seed=12)
    # creatinine sits beyond the template tail cut-off
    assert not ch.states[0].cols[:, 1].any()
    before = ch.states[0].copy()
    for _ in range(10):
        assert mcmc.block_update_beta_theta(ch, [mod], 1, cfg)
    np.testing.assert_array_equal(ch.states[0].theta, before.theta)
    np.testing.assert_array_equal(ch.beta, before.beta)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-4, 10), st.floats(-1, 1), st.floats(0.001, 2), st.integers(0, 2**31))
def test_truncated_cauchy_stays_inside(centre, scale, lo, width, seed):
    x = mcmc.truncated_cauchy(np.random.default_rng(seed), centre, scale, lo, lo + width)
    assert lo <= x <= lo + width


# -- population moves ------------------------------------------------------------


def _pair(mod, seed=13):
    cfg = mcmc.SamplerConfig(iterations=2, burnin=1, chains=2, ladder_max=2.0, anneal=False)
    pop = mcmc.build_population([mod], cfg, seed)
    return pop, cfg


def test_exchange_of_equal_states_is_accepted():
    mod = _singlet_model()
    pop, _ = _pair(mod)
    assert mcmc.exchange_log_ratio(pop.chains[0], pop.chains[1], [mod]) == 0.0
    assert mcmc.exchange_move(pop, 0, [mod])


def test_exchange_at_equal_temperatures_is_accepted():
    mod = _singlet_model()
    pop, _ = _pair(mod)
    _burn(pop.chains[1], [mod], 20)
    pop.chains[1].temperature = pop.chains[0].temperature
    assert mcmc.exchange_log_ratio(pop.chains[0], pop.chains[1], [mod]) == pytest.approx(0.0, abs=1e-9)
    a, b = pop.chains[0].states, pop.chains[1].states
    assert mcmc.exchange_move(pop, 0, [mod])
    assert pop.chains[0].states is b and pop.chains[1].states is a


def test_exchange_rate_matches_formula():
    mod = _singlet_model()
    pop, _ = _pair(mod)
    _burn(pop.chains[0], [mod], 30)
    pop.chains[1].states[0].lam *= 0.9999
    pop.chains[1].states[0].psi *= 1.001
    r = mcmc.exchange_log_ratio(pop.chains[0], pop.chains[1], [mod])
    # direct evaluation of the tempered targets before and after the swap
    a, b = pop.chains[0], pop.chains[1]
    Ta, Tb = a.temperature, b.temperature
    lpa = P.log_posterior(a.states[0], mod, Ta) + P.log_posterior(b.states[0], mod, Tb)
    lpb = P.log_posterior(b.states[0], mod, Ta) + P.log_posterior(a.states[0], mod, Tb)
    assert r == pytest.approx(lpb - lpa, abs=1e-6 * max(1.0, abs(r)))
    p = min(1.0, math.exp(r))
    n, hits = 4000, 0
    for _ in range(n):
        if mcmc.exchange_move(pop, 0, [mod]):
            hits += 1
            pop.chains[0].states, pop.chains[1].states = pop.chains[1].states, pop.chains[0].states
    se = math.sqrt(max(p * (1 - p), 1e-12) / n)
    assert abs(hits / n - p) <= 3 * se + 1e-12


def test_copy_move_needs_two_chains():
    mod = _singlet_model()
    cfg = mcmc.SamplerConfig(iterations=2, burnin=1, chains=1)
    pop = mcmc.build_population([mod], cfg, 0)
    with pytest.raises(mcmc.ConfigurationError):
        mcmc.copy_move(pop, 0, 0, 0, [mod], cfg)


def test_copy_move_from_identical_partner_is_symmetric():
    mod = _singlet_model()
    pop, cfg = _pair(mod)
    cur = pop.chains[0].states[0].shifts[0]
    new = cur + 0.01
    fwd = mcmc._cauchy_logpdf(cur, cur, cfg.copy_scale) - mcmc._cauchy_logpdf(new, cur, cfg.copy_scale)
    rev = mcmc._cauchy_logpdf(new, cur, cfg.copy_scale) - mcmc._cauchy_logpdf(cur, cur, cfg.copy_scale)
    assert fwd + rev == 0.0
    # only the acting chain can change
    other = pop.chains[1].states[0].copy()
    for _ in range(30):
        mcmc.copy_move(pop, 0, 0, 0, [mod], cfg)
    np.testing.assert_array_equal(pop.chains[1].states[0].shifts, other.shifts)
    np.testing.assert_array_equal(pop.chains[1].states[0].theta, other.theta)


@pytest.mark.slow
def test_copy_moves_spread_a_good_shift():
    mod = _singlet_model(noise=5e-3, shifts=(1.92,), prior=P.PriorConfig(d=1e4))
    hits = 0
    for seed in range(50):
        pop, cfg = _pair(mod, seed)
        pop.chains[0].states[0].shifts[0] = 1.895
        pop.chains[0].states[0].refresh(mod)
        target = pop.chains[1].states[0].shifts[0]
        for _ in range(500):
            mcmc.copy_move(pop, 0, 0, 0, [mod], cfg)
            if abs(pop.chains[0].states[0].shifts[0] - target) <= 0.002:
                hits += 1
                break
    assert hits >= 45


# -- the driver ---------------------------------------------------------------------


def _quick(**kw):
    base = dict(iterations=60, burnin=20, chains=1, t_start=2.0)
    base.update(kw)
    return mcmc.SamplerConfig(**base)


def test_run_is_deterministic():
    mod = _singlet_model()
    spec, cat = mod.spectrum, mod.catalog
    a = mcmc.run(spec, cat, sampler=_quick(chains=2), seed=21)[0]
    b = mcmc.run(spec, cat, sampler=_quick(chains=2), seed=21)[0]
    np.testing.assert_array_equal(a.table(), b.table())
    c = mcmc.run(spec, cat, sampler=_quick(chains=2), seed=22)[0]
    assert not np.array_equal(a.table(), c.table())


def test_single_spectrum_set_matches_single_spectrum():
    mod = _singlet_model()
    a = mcmc.run(mod.spectrum, mod.catalog, sampler=_quick(), seed=3)[0]
    b = mcmc.run(SpectrumSet((mod.spectrum,)), mod.catalog, sampler=_quick(), seed=3)[0]
    np.testing.assert_array_equal(a.table(), b.table())


def test_sample_log_shape_and_finiteness():
    mod = _singlet_model()
    log, summ, seed = mcmc.run(mod.spectrum, mod.catalog, sampler=_quick(thin=3), seed=4)
    assert log.n_draws == (60 - 20) // 3
    assert log.table().shape == (log.n_draws, len(log.columns()))
    assert np.all(np.isfinite(log.log_posterior[20:]))
    assert np.all(log.temperature[20:] == 1.0)
    assert set(summ.beta) == {"mean", "sd", "q2.5", "q97.5", "ess"}
    assert seed == 4


def test_adaptation_freezes_after_burnin():
    mod = _singlet_model()
    steps = []

    def cb(i, pop):
        if i >= 20:
            steps.append(pop.chains[0].adapt["shift"][0].log_step.copy())

    mcmc.run(mod.spectrum, mod.catalog, sampler=_quick(adapt_batch=5), seed=5, callback=cb)
    assert all(np.array_equal(s, steps[0]) for s in steps)


def test_no_overlap_is_a_configuration_error():
    cat = load_bundled_catalog().subset(["lactate"])
    grid = ChemicalShiftGrid.regular(6.0, 7.0, 128)
    spec = Spectrum(grid, np.random.default_rng(0).normal(size=128))
    with pytest.raises(mcmc.ConfigurationError):
        mcmc.run(spec, cat, sampler=_quick(), seed=0)


def test_noiseless_singlet_recovered_within_two_percent():
    mod = _singlet_model(noise=0.0, beta=1e-4, shifts=(1.912,))
    log, summ, _ = mcmc.run(mod.spectrum, mod.catalog,
                            sampler=mcmc.SamplerConfig(iterations=2000, burnin=1000, chains=1, t_start=4), seed=1)
    assert summ.beta["mean"][0] == pytest.approx(1e-4, rel=0.02)


def test_effective_size_bounds():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=4000)
    assert 3000 < mcmc.effective_size(iid) <= 4000
    ar = np.zeros(4000)
    for t in range(1, 4000):
        ar[t] = 0.95 * ar[t - 1] + rng.normal()
    assert mcmc.effective_size(ar) < 400
