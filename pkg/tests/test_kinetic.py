import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats
from sklearn.base import clone

from econokin import kinetic as kn
from econokin.analytic import ModelParams
from econokin.exceptions import (AcceptanceBoundError, InvariantViolation,
                                 ParameterError)
from econokin.fokker_planck import Grid


def linear_setup(lam=0.1, r=0.05, delta=1.0, kappa=1.0, shape=4.0, mean=1.0):
    rule = kn.LinearMarket(lam, kn.TwoPoint(r), kn.MarketSpec.gamma(shape, mean))
    return rule, ModelParams(lam=lam, sigma=r * r, delta=delta, kappa_kernel=kappa)


def gamma_without_tilt(shape, mean):
    """The same Gamma market seen only through a sampler and a density."""
    d = stats.gamma(shape, scale=mean / shape)
    return kn.MarketSpec(lambda rng, size: d.rvs(size=size, random_state=rng),
                         pdf=d.pdf)


# --- ingredients ---------------------------------------------------------------

def test_kernel_values():
    assert kn.kernel_value(2.0, 3.0, 0.5) == pytest.approx(math.sqrt(6.0))
    assert kn.kernel_value(2.0, 3.0, 1.0, kappa_kernel=2.0) == 12.0
    assert kn.kernel_value(0.0, 5.0, 0.0, kappa_kernel=1.5) == 1.5
    assert np.array_equal(kn.kernel_value([0.0, 1.0], 4.0, 0.5), [0.0, 2.0])
    with pytest.raises(ParameterError):
        kn.kernel_value(-1.0, 1.0, 0.5)


def test_eta_support_rules():
    mk = kn.MarketSpec.gamma(4.0)
    with pytest.raises(ParameterError):
        kn.LinearMarket(0.2, kn.TwoPoint(0.3), mk)
    kn.LinearMarket(0.2, kn.TwoPoint(0.3), mk, strict_risk=False)
    with pytest.raises(ParameterError):       # could drive wealth negative
        kn.LinearMarket(0.05, kn.TwoPoint(0.96), mk, strict_risk=False)
    with pytest.raises(ParameterError):
        kn.BinaryCPT(0.1, kn.TwoPoint(0.1))
    with pytest.raises(ParameterError):
        kn.TwoPoint(0.0)
    with pytest.raises(ParameterError):
        kn.TruncatedGaussianLike(sigma=0.4, bound=1.0)


def test_eta_moments(rng):
    tp = kn.TwoPoint(0.3)
    x = tp.sample(rng, 10 ** 5)
    assert set(np.unique(x)) == {-0.3, 0.3}
    assert tp.variance == pytest.approx(0.09)
    tg = kn.TruncatedGaussianLike(sigma=0.01, bound=0.25)
    x = tg.sample(rng, 2 * 10 ** 5)
    assert x.min() >= -0.25 and x.max() <= 0.25
    se_var = math.sqrt((np.mean(x ** 4) - x.var() ** 2) / len(x))
    assert abs(x.var() - 0.01) < 4 * se_var
    assert abs(x.mean()) < 4 * x.std() / math.sqrt(len(x))
    s = tg.scaled(0.5)
    assert s.variance == pytest.approx(0.0025) and s.bound == 0.125


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 2.0])
def test_gamma_market_moments_against_samples(alpha, rng):
    mk = kn.MarketSpec.gamma(4.0, 1.0)
    x = mk.sample(rng, 10 ** 6) ** alpha
    assert abs(mk.moment(alpha) - x.mean()) < 3 * x.std() / 1e3


def test_custom_market_moments_by_quadrature():
    ref = kn.MarketSpec.gamma(3.0, 2.0)
    custom = gamma_without_tilt(3.0, 2.0)
    assert not custom.has_tilted_sampler
    for a in (0.5, 1.0, 1.5, 2.5):
        assert custom.moment(a) == pytest.approx(ref.moment(a), rel=1e-9)
    with pytest.raises(ParameterError):
        kn.MarketSpec(lambda rng, n: rng.pareto(1.5, n), pdf=lambda v: 1.5 * (1 + v) ** -2.5)
    with pytest.raises(ParameterError):
        custom.sample_tilted(np.random.default_rng(0), 3, 0.5)


@pytest.mark.parametrize("delta", [0.25, 1.0])
def test_tilted_market_law(delta, rng):
    mk = kn.MarketSpec.gamma(4.0, 1.0)
    x = mk.sample_tilted(rng, 10 ** 5, delta)
    # oracle cdf of v^delta E(v) / M_delta by quadrature
    E = stats.gamma(4.0, scale=0.25)
    Md = integrate.quad(lambda v: v ** delta * E.pdf(v), 0, np.inf)[0]
    knots = np.linspace(0, 8, 801)
    pieces = [integrate.quad(lambda v: v ** delta * E.pdf(v), a, b)[0]
              for a, b in zip(knots[:-1], knots[1:])]
    table = np.concatenate([[0.0], np.cumsum(pieces)]) / Md
    assert stats.kstest(x, lambda t: np.interp(t, knots, table)).pvalue > 1e-3
    assert mk.target_mean(delta) == pytest.approx(
        mk.moment(1 + delta) / mk.moment(delta))
    assert kn.MarketSpec.gamma_for_target(4.0, 1.3, delta).target_mean(delta) \
        == pytest.approx(1.3)


def test_mean_conservative_omega_has_mean_half(rng):
    x = kn.GamblingMeanConservative(3.0).sample_omega(rng, 10 ** 6)
    assert abs(x.mean() - 0.5) < 3 * x.std() / 1e3
    with pytest.raises(ParameterError):
        kn.GamblingMeanConservative(1.0)


# --- single sweeps ------------------------------------------------------------

@pytest.mark.parametrize("tilted", [True, False])
@pytest.mark.parametrize("delta", [0.0, 1.0])
def test_expected_mean_change_of_a_sweep(tilted, delta):
    # all agents at w0: E[change of mean] = dt kappa lam w0^d (M_{1+d} - w0 M_d)
    lam, r, w0, dt, n = 0.1, 0.05, 2.0, 0.02, 10 ** 5
    mk = kn.MarketSpec.gamma(4.0, 1.0) if tilted else gamma_without_tilt(4.0, 1.0)
    rule = kn.LinearMarket(lam, kn.TwoPoint(r), mk)
    p = ModelParams(lam=lam, sigma=r * r, delta=delta)
    rate = w0 ** delta * (mk.moment(1 + delta) - w0 * mk.moment(delta))
    drift = dt * lam * rate
    changes = []
    for seed in range(6):
        e = kn.ParticleEnsemble(np.full(n, w0), seed=seed)
        kn.step_linear(e, rule, p, dt)
        changes.append(e.moment(1.0) - w0)
    changes = np.array(changes)
    # per-agent variance of the jump, times the selection probability
    jump_var = (r * w0) ** 2 + lam ** 2 * (mk.moment(2) - 2 * w0 + w0 ** 2)
    se = math.sqrt(dt * w0 ** delta * mk.moment(delta) * jump_var / n / len(changes))
    assert abs(changes.mean() - drift) < 4 * se


@given(lam=st.floats(0.05, 0.9), frac=st.floats(0.01, 0.99),
       delta=st.sampled_from([0.0, 0.3, 1.0]), seed=st.integers(0, 2 ** 32))
@settings(max_examples=30, deadline=None)
def test_linear_runs_stay_nonnegative(lam, frac, delta, seed):
    rule, p = linear_setup(lam=lam, r=frac * min(lam, 1 - lam), delta=delta)
    e = kn.ParticleEnsemble.sample(stats.expon(), 300, seed=seed)
    kn.run(e, rule, p, 1.0)
    assert np.all(e.wealths >= 0) and np.all(np.isfinite(e.wealths))


@given(rule_kind=st.sampled_from(["gambling", "mean", "binary"]),
       delta=st.sampled_from([0.0, 0.5, 1.0]), seed=st.integers(0, 2 ** 32))
@settings(max_examples=30, deadline=None)
def test_binary_runs_stay_nonnegative(rule_kind, delta, seed):
    rule = {"gambling": kn.GamblingConservative(),
            "mean": kn.GamblingMeanConservative(3.0),
            "binary": kn.BinaryCPT(0.3, kn.TwoPoint(0.2))}[rule_kind]
    p = ModelParams(lam=0.3, sigma=0.04, delta=delta)
    e = kn.ParticleEnsemble.sample(stats.expon(), 300, seed=seed)
    kn.run(e, rule, p, 1.0)
    assert np.all(e.wealths >= 0)


@pytest.mark.parametrize("rule", [kn.LinearMarket(0.1, kn.TwoPoint(0.05),
                                                  gamma_without_tilt(4.0, 1.0)),
                                  kn.GamblingConservative(),
                                  kn.BinaryCPT(0.1, kn.TwoPoint(0.05))])
def test_zero_wealth_agents_never_trade(rule):
    p = ModelParams(lam=0.1, sigma=0.0025, delta=0.5)
    w = np.tile([0.0, 1.0, 2.0, 0.5], 250)
    e = kn.ParticleEnsemble(w, seed=1)
    kn.run(e, rule, p, 5.0)
    assert np.all(e.wealths[::4] == 0.0)
    assert e.stats["accepted"] > 0
    rule_t, _ = linear_setup(delta=0.5)
    e = kn.ParticleEnsemble(w, seed=1)
    kn.run(e, rule_t, p, 5.0)
    assert np.all(e.wealths[::4] == 0.0)


def test_same_seed_is_bit_identical():
    rule, p = linear_setup(delta=0.5)
    for n_chunks in (1, 4):
        runs = []
        for _ in range(2):
            e = kn.ParticleEnsemble.sample(stats.gamma(3.0), 2000, seed=42)
            kn.run(e, rule, p, 2.0, n_chunks=n_chunks)
            runs.append(e.wealths)
        assert np.array_equal(runs[0], runs[1])
    e1 = kn.ParticleEnsemble.sample(stats.gamma(3.0), 2000, seed=42)
    e2 = e1.copy()
    kn.run(e1, rule, p, 1.0)
    kn.run(e2, rule, p, 1.0)
    assert np.array_equal(e1.wealths, e2.wealths)


def test_conservative_gambling_keeps_total_wealth():
    e = kn.ParticleEnsemble.sample(stats.expon(), 5000, seed=3)
    total = e.wealths.sum()
    kn.run(e, kn.GamblingConservative(), ModelParams(lam=0.5, sigma=1.0, delta=0.5), 5.0)
    assert abs(e.wealths.sum() - total) <= 1e-12 * total
    assert e.stats["sum_sq_total_change"] < 1e-20
    assert e.stats["accepted"] > 1000


def test_binary_cpt_mean_within_martingale_error():
    # the mean is only conserved in expectation; its error includes the
    # quadratic variation of the realised trades
    rule = kn.BinaryCPT(0.3, kn.TwoPoint(0.2))
    p = ModelParams(lam=0.3, sigma=0.04, delta=0.5)
    e = kn.ParticleEnsemble.sample(stats.uniform(0.5, 1.0), 1000, seed=5)
    m0 = e.moment(1.0)
    kn.run(e, rule, p, 200.0, dt=0.01)
    se = kn.mean_standard_error(e)
    assert e.stats["sum_sq_total_change"] > 0
    assert abs(e.moment(1.0) - m0) < 3 * se


def test_acceptance_bound_and_substeps():
    rule, p = linear_setup(delta=1.0)
    e = kn.ParticleEnsemble(np.array([1.0, 50.0, 3.0]), seed=0)
    with pytest.raises(AcceptanceBoundError):
        kn.step_linear(e, rule, p, 1.0)
    kn.step_linear(e, rule, p, 1.0, on_overflow="substep")
    assert e.stats["substeps"] > 0 and e.time == pytest.approx(1.0)
    g = kn.ParticleEnsemble(np.array([1.0, 50.0, 3.0, 2.0]), seed=0)
    with pytest.raises(AcceptanceBoundError):
        kn.step_bilinear(g, kn.GamblingConservative(), p, 1.0)
    kn.step_bilinear(g, kn.GamblingConservative(), p, 1.0, on_overflow="substep")
    assert g.stats["substeps"] > 100 and g.time == pytest.approx(1.0)
    assert np.all(g.wealths >= 0)
    with pytest.raises(ParameterError):
        kn.step_bilinear(kn.ParticleEnsemble([1.0]), kn.GamblingConservative(), p, 0.1)
    with pytest.raises(ParameterError):
        kn.step_linear(e, kn.GamblingConservative(), p, 0.1)


def test_rule_and_params_must_agree():
    rule, _ = linear_setup(lam=0.1)
    e = kn.ParticleEnsemble(np.ones(10))
    with pytest.raises(ParameterError):
        kn.run(e, rule, ModelParams(lam=0.2, sigma=0.0025), 1.0)
    with pytest.raises(ParameterError):
        kn.run(e, rule, ModelParams(lam=0.1, sigma=0.01), 1.0)


# --- moments and bounds ---------------------------------------------------------

def test_moment_series_and_jackknife(rng):
    x = rng.exponential(size=5000)
    est, se = kn.jackknife(x, np.mean)
    assert est == pytest.approx(x.mean())
    assert se == pytest.approx(x.std(ddof=1) / math.sqrt(len(x)), rel=0.25)
    ms = kn.moment_series([(0.0, x), (1.0, 2 * x)], alphas=(0, 1, 2))
    m0, se0 = ms.m(0.0)
    assert np.all(m0 == 1.0) and np.all(se0 == 0.0)
    m1, _ = ms.m(1.0)
    assert m1[1] == pytest.approx(2 * m1[0])
    with pytest.raises(ParameterError):
        kn.moment_series([(0, x)], alphas=(-1,))


def test_mean_derivative_bound_against_short_runs():
    # exact rate kappa lam (M_{1+d} m_d - M_d m_{1+d}) at t=0, via replicas
    rule, p = linear_setup(lam=0.2, r=0.1, delta=0.5)
    base = kn.ParticleEnsemble.sample(stats.gamma(2.0, scale=1.5), 20000, seed=9)
    w0 = base.wealths.copy()
    mk, d = rule.market, p.delta
    exact = p.lam * (mk.moment(1 + d) * np.mean(w0 ** d)
                     - mk.moment(d) * np.mean(w0 ** (1 + d)))
    m1 = w0.mean()
    assert kn.mean_derivative_bound(m1, rule, p) >= exact
    T = 0.05
    fd = []
    for seed in range(8):
        e = kn.ParticleEnsemble(w0, seed=100 + seed)
        kn.run(e, rule, p, T)
        fd.append((e.moment(1.0) - m1) / T)
    fd = np.array(fd)
    se = fd.std(ddof=1) / math.sqrt(len(fd))
    assert abs(fd.mean() - exact) < 4 * se + 0.05 * abs(exact)
    assert fd.mean() <= kn.mean_derivative_bound(m1, rule, p) + 4 * se


def test_mean_and_second_moment_bounds_hold_on_a_short_run():
    rule, p = linear_setup(lam=0.1, r=0.05, delta=1.0)
    e = kn.ParticleEnsemble.sample(stats.gamma(4.0, scale=0.5), 2000, seed=2)
    bound1 = kn.mean_bound(e.moment(1.0), rule.market, 1.0)
    bound2 = max(e.moment(2.0), kn.second_moment_bar(rule, 1.0))
    hist = kn.run(e, rule, p, 50.0, record_every=1.0)
    ms = kn.moment_series(hist)
    m1, s1 = ms.m(1.0)
    m2, s2 = ms.m(2.0)
    assert np.all(m1 <= bound1 + 3 * s1)
    assert np.all(m2 <= bound2 + 3 * s2)
    bad = kn.LinearMarket(0.1, kn.TwoPoint(0.5), rule.market, strict_risk=False)
    with pytest.raises(ParameterError):
        kn.second_moment_bar(bad, 1.0)


# --- grazing ---------------------------------------------------------------------

def grazing_setup():
    lam, r, delta = 0.5, 0.45, 1.0
    mk = kn.MarketSpec.gamma_for_target(4.0, 1.0, delta)
    kappa = 2.0 / (r * r * mk.moment(delta))
    rule = kn.LinearMarket(lam, kn.TwoPoint(r), mk)
    return rule, ModelParams(lam=lam, sigma=r * r, delta=delta, kappa_kernel=kappa)


def test_grazing_reference_constants():
    rule, p = grazing_setup()
    ref, c = kn.grazing_reference(rule, p)
    assert ref.m == pytest.approx(1.0) and ref.mu == pytest.approx(2 * 0.5 / 0.2025)
    assert c == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        kn.grazing_reference(kn.GamblingConservative(), p)


def test_grazing_drift_does_not_depend_on_epsilon():
    rule, p = grazing_setup()
    base = kn.ParticleEnsemble.sample(stats.gamma(8.0, scale=1.5 / 8), 20000, seed=4)
    w0 = base.wealths.copy()
    T = 0.01
    mk, d = rule.market, p.delta
    exact = p.kappa_kernel * p.lam * (mk.moment(1 + d) * np.mean(w0 ** d)
                                      - mk.moment(d) * np.mean(w0 ** (1 + d)))
    out = {}
    for eps in (0.2, 0.05):
        fd = []
        for seed in range(8):
            e = kn.ParticleEnsemble(w0, seed=seed)
            kn.run_grazing(e, rule, p, eps, T)
            assert e.time == pytest.approx(T)
            fd.append((e.moment(1.0) - w0.mean()) / T)
        out[eps] = (np.mean(fd), np.std(fd, ddof=1) / math.sqrt(len(fd)))
    (a, sa), (b, sb) = out[0.2], out[0.05]
    assert abs(a - b) < 4 * math.hypot(sa, sb)
    # the rate moves within T, so the comparison to the t=0 value is loose
    assert a == pytest.approx(exact, rel=0.1) and b == pytest.approx(exact, rel=0.1)


def test_remainder_scales_with_epsilon_squared():
    rule, p = grazing_setup()
    e = kn.ParticleEnsemble.sample(stats.gamma(4.0, scale=0.25), 1000, seed=0)
    r1 = kn.remainder_statistic(e, rule, p, 0.1)
    r2 = kn.remainder_statistic(e, rule, p, 0.05)
    assert r1 > 0 and r1 / r2 == pytest.approx(4.0, rel=1e-12)


def test_grazing_scaling_checks():
    rule, _ = grazing_setup()
    for eps in (0.0, 0.6, -0.1):
        with pytest.raises(ParameterError):
            kn.check_grazing_scaling(rule, eps)
    loose = kn.LinearMarket(0.1, kn.TwoPoint(0.5), rule.market, strict_risk=False)
    with pytest.raises(ParameterError):
        kn.check_grazing_scaling(loose, 0.1)
    assert rule.scaled(0.1).lam == pytest.approx(0.05)
    assert rule.scaled(0.1).eta.variance == pytest.approx(0.1 * 0.2025)


def test_grazing_records_smoothed_entropies():
    rule, p = grazing_setup()
    ref, _ = kn.grazing_reference(rule, p)
    grid = Grid.for_params(ref, 64)
    from econokin.fokker_planck import discrete_equilibrium
    q = discrete_equilibrium(ref, grid)
    e = kn.ParticleEnsemble.sample(stats.gamma(8.0, scale=1.5 / 8), 2000, seed=1)
    series, _ = kn.run_grazing(e, rule, p, 0.2, 0.05, grid=grid,
                               record_every=0.025, reference=q)
    assert len(series) == 3
    assert np.all(np.isfinite(series["H"])) and np.all(series["l1_to_eq"] > 0)
    hist = kn.histogram_density(e, grid, smooth=True)
    assert np.all(hist.values > 0)
    assert hist.values @ grid.widths == pytest.approx(1.0)


# --- drivers and estimator -----------------------------------------------------------

def test_ergodic_average_needs_enough_snapshots():
    e = kn.ParticleEnsemble(np.ones(100), seed=0)
    p = ModelParams(lam=0.5, sigma=1.0, delta=0.0)
    with pytest.raises(ParameterError):
        kn.ergodic_average(e, kn.GamblingConservative(), p, 0.0, 1.0, 0.5, np.var)
    est, se = kn.ergodic_average(e, kn.GamblingConservative(), p, 1.0, 5.0, 0.1,
                                 np.mean, n_batches=5)
    assert est == pytest.approx(1.0, rel=1e-12) and se < 1e-12


def test_estimator_interface():
    X = stats.gamma(3.0).rvs(size=(500, 1), random_state=0)
    est = kn.KineticWealthSimulator(delta=0.5, t_end=2.0, record_every=0.5,
                                    random_state=7)
    assert est.get_params()["delta"] == 0.5
    assert clone(est).get_params() == est.get_params()
    est.fit(X)
    assert est.wealths_.shape == (500,) and len(est.moments_.times) == 5
    out = est.transform(X)
    assert out.shape == (500, 1) and np.array_equal(out.ravel(), est.wealths_)
    for rule in ("gambling", "gambling-mean", "binary"):
        kn.KineticWealthSimulator(rule=rule, lam=0.3, r=0.2, t_end=0.5,
                                  random_state=0).fit(X)
    graz = kn.KineticWealthSimulator(lam=0.5, r=0.45, epsilon=0.1, t_end=0.05,
                                     random_state=0).fit(X)
    assert graz.ensemble_.time == pytest.approx(0.05)
    with pytest.raises(ParameterError):
        kn.KineticWealthSimulator(rule="nope").fit(X)
    with pytest.raises(ParameterError):
        kn.KineticWealthSimulator().fit(np.ones((5, 2)))
