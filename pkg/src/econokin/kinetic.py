"""Direct-simulation Monte Carlo for the kinetic wealth models.

Interactions happen at rate ``kappa (v w)^delta``.  Each sweep of length
``dt`` selects candidates with probability ``dt * B`` where ``B`` bounds the
kernel, then accepts a candidate with probability ``kernel / B``.  ``B`` is
recomputed every sweep from the current largest wealth, so no kernel
truncation is needed; a sweep with ``dt * B > 1`` raises
:class:`AcceptanceBoundError` unless substepping is requested.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, optimize, special, stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import diagnostics
from ._validation import check_scalar, check_wealths
from .analytic import ModelParams
from .exceptions import (AcceptanceBoundError, InvariantViolation,
                         ParameterError)


def kernel_value(v, w, delta, kappa_kernel=1.0):
    """``kappa (v w)^delta``; constant ``kappa`` when ``delta == 0``."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(v < 0) or np.any(w < 0):
        raise ParameterError("kernel arguments must be nonnegative")
    if delta == 0:
        out = np.full(np.broadcast(v, w).shape, float(kappa_kernel))
    else:
        out = kappa_kernel * (v * w) ** delta
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Random ingredients
# ---------------------------------------------------------------------------

class EtaSpec:
    """Centred risk variable ``eta`` with bounded support."""

    variance = None
    support = (None, None)

    def sample(self, rng, size):
        raise NotImplementedError

    def scaled(self, factor):
        raise NotImplementedError

    def check_support(self, lam, strict_risk=True):
        """Raise unless ``eta >= lam - 1`` (and ``|eta| < lam`` if ``strict_risk``)."""
        lo, hi = self.support
        if lo < lam - 1.0 - 1e-15:
            raise ParameterError(
                f"eta support starts at {lo}, below lam - 1 = {lam - 1.0}; "
                "post-trade wealth could become negative")
        if strict_risk and not max(-lo, hi) < lam:
            raise ParameterError(
                f"risk amplitude {max(-lo, hi)} must be below lam = {lam}")


@dataclass(frozen=True)
class TwoPoint(EtaSpec):
    """``eta = +r`` or ``-r`` with probability one half each."""

    r: float

    def __post_init__(self):
        check_scalar(self.r, "r", low=0, include_low=False)

    @property
    def variance(self):
        return self.r ** 2

    @property
    def support(self):
        return (-self.r, self.r)

    def sample(self, rng, size):
        return np.where(rng.random(size) < 0.5, -self.r, self.r)

    def scaled(self, factor):
        return TwoPoint(self.r * factor)


@dataclass(frozen=True)
class TruncatedGaussianLike(EtaSpec):
    """Gaussian truncated to ``[-bound, bound]`` and rescaled to variance ``sigma``."""

    sigma: float
    bound: float

    def __post_init__(self):
        check_scalar(self.sigma, "sigma", low=0, include_low=False)
        check_scalar(self.bound, "bound", low=0, include_low=False)
        if not self.sigma < self.bound ** 2 / 3.0:
            raise ParameterError(
                "a truncated Gaussian on [-b, b] has variance below b^2/3")
        object.__setattr__(self, "_scale", self._solve_scale())

    def _solve_scale(self):
        b = self.bound

        def gap(log_s):
            s = math.exp(log_s)
            return stats.truncnorm(-b / s, b / s, scale=s).var() - self.sigma
        return math.exp(optimize.brentq(gap, math.log(b) - 20,
                                        math.log(b) + 20, xtol=1e-14))

    @property
    def variance(self):
        return self.sigma

    @property
    def support(self):
        return (-self.bound, self.bound)

    def sample(self, rng, size):
        s = self._scale
        return stats.truncnorm.rvs(-self.bound / s, self.bound / s, scale=s,
                                   size=size, random_state=rng)

    def scaled(self, factor):
        return TruncatedGaussianLike(self.sigma * factor ** 2,
                                     self.bound * factor)


class MarketSpec:
    """Distribution ``E`` of market wealth.

    The default is a Gamma law with closed-form moments and a closed-form
    ``v^delta``-tilted sampler.  Custom markets pass a sampler and a density;
    their moments are computed by quadrature.
    """

    def __init__(self, sampler, pdf=None, moment_func=None, tilted=None,
                 name="custom"):
        self._sampler = sampler
        self._pdf = pdf
        self._moment_func = moment_func
        self._tilted = tilted
        self.name = name
        if moment_func is None and pdf is None:
            raise ParameterError("a market needs a density or a moment function")
        for a in (0.5, 1.0, 2.0, 3.0, 4.0):
            if not np.isfinite(self.moment(a)):
                raise ParameterError(f"market moment M_{a} is not finite")

    @classmethod
    def gamma(cls, shape, mean=1.0):
        check_scalar(shape, "shape", low=0, include_low=False)
        check_scalar(mean, "mean", low=0, include_low=False)
        scale = mean / shape

        def moment(a):
            return math.exp(a * math.log(scale) + special.gammaln(shape + a)
                            - special.gammaln(shape))

        mk = cls(lambda rng, size: rng.gamma(shape, scale, size),
                 moment_func=moment,
                 tilted=lambda rng, size, d: rng.gamma(shape + d, scale, size),
                 name=f"gamma(shape={shape!r}, mean={mean!r})")
        mk.shape, mk.mean = shape, mean
        return mk

    @classmethod
    def gamma_for_target(cls, shape, m_target, delta):
        """Gamma market whose ratio ``M_{1+delta} / M_delta`` equals ``m_target``."""
        return cls.gamma(shape, m_target * shape / (shape + delta))

    def sample(self, rng, size):
        return self._sampler(rng, size)

    @property
    def has_tilted_sampler(self):
        return self._tilted is not None

    def sample_tilted(self, rng, size, delta):
        """Draws from ``v^delta E(v) / M_delta``."""
        if self._tilted is None:
            raise ParameterError(f"market {self.name} has no tilted sampler")
        return self._tilted(rng, size, delta)

    def moment(self, alpha):
        if self._moment_func is not None:
            return float(self._moment_func(alpha))
        # a divergent moment shows up as a quadrature warning, not as inf
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, _ = integrate.quad(lambda v: v ** alpha * self._pdf(v), 0,
                                        np.inf, limit=200, epsabs=1e-12,
                                        epsrel=1e-10)
            except integrate.IntegrationWarning:
                return math.inf
        return val

    def declared_moments(self, delta):
        orders = sorted({delta, 1 + delta, 2 + delta, 1 + 2 * delta,
                         0.0, 1.0, 2.0, 3.0, 4.0})
        return {a: self.moment(a) for a in orders}

    def target_mean(self, delta):
        """``M_{1+delta} / M_delta``, the mean the drift pulls towards."""
        return self.moment(1 + delta) / self.moment(delta)


@dataclass(frozen=True)
class SymmetricOmega:
    """``omega ~ Beta(b, b)`` on (0, 1); ``b = 1`` is the uniform law."""

    b: float = 1.0

    def __post_init__(self):
        check_scalar(self.b, "b", low=0, include_low=False)

    def sample(self, rng, size):
        if self.b == 1.0:
            return rng.random(size)
        return rng.beta(self.b, self.b, size)


# ---------------------------------------------------------------------------
# Interaction rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearMarket:
    lam: float
    eta: EtaSpec
    market: MarketSpec
    strict_risk: bool = True

    def __post_init__(self):
        check_scalar(self.lam, "lam", low=0, high=1, include_low=False,
                     include_high=False)
        self.eta.check_support(self.lam, self.strict_risk)

    def scaled(self, epsilon):
        # the scaled rule only needs positivity: |eta| < lam is not scale invariant
        return replace(self, lam=epsilon * self.lam,
                       eta=self.eta.scaled(math.sqrt(epsilon)),
                       strict_risk=False)

    def model_params(self, delta, kappa_kernel=1.0):
        return ModelParams(lam=self.lam, sigma=self.eta.variance,
                           m=self.market.target_mean(delta), delta=delta,
                           kappa_kernel=kappa_kernel)


@dataclass(frozen=True)
class GamblingConservative:
    omega: SymmetricOmega = field(default_factory=SymmetricOmega)


@dataclass(frozen=True)
class GamblingMeanConservative:
    a: float = 3.0

    def __post_init__(self):
        check_scalar(self.a, "a", low=1, include_low=False)

    def sample_omega(self, rng, size):
        return 0.25 / rng.beta(self.a + 0.5, self.a - 0.5, size)


@dataclass(frozen=True)
class BinaryCPT:
    lam: float
    eta: EtaSpec
    strict_risk: bool = True

    def __post_init__(self):
        check_scalar(self.lam, "lam", low=0, high=1, include_low=False,
                     include_high=False)
        self.eta.check_support(self.lam, self.strict_risk)

    def scaled(self, epsilon):
        return replace(self, lam=epsilon * self.lam,
                       eta=self.eta.scaled(math.sqrt(epsilon)),
                       strict_risk=False)


BILINEAR_RULES = (GamblingConservative, GamblingMeanConservative, BinaryCPT)


def check_rule_params(rule, p):
    """The rule's trade constants must agree with ``p`` where both define them."""
    if isinstance(rule, (LinearMarket, BinaryCPT)):
        if not math.isclose(rule.lam, p.lam, rel_tol=1e-12):
            raise ParameterError(f"rule lam {rule.lam} differs from params lam {p.lam}")
        if not math.isclose(rule.eta.variance, p.sigma, rel_tol=1e-12):
            raise ParameterError(
                f"eta variance {rule.eta.variance} differs from params sigma {p.sigma}")


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

class ParticleEnsemble:
    """``n`` agents' wealths, the model time and a private generator."""

    def __init__(self, wealths, seed=None, time=0.0):
        self.wealths = check_wealths(wealths)
        self.n = len(self.wealths)
        if self.n < 1:
            raise ParameterError("an ensemble needs at least one particle")
        self.rng = np.random.default_rng(seed)
        self.time = float(time)
        self.stats = {"sweeps": 0, "candidates": 0, "accepted": 0,
                      "substeps": 0, "sum_sq_total_change": 0.0}

    @classmethod
    def sample(cls, dist, n, seed=None):
        """Draw initial wealths from a frozen ``scipy.stats`` law (or anything with ``rvs``)."""
        rng = np.random.default_rng(seed)
        w = np.asarray(dist.rvs(size=int(n), random_state=rng), dtype=float)
        ens = cls(w, seed=None)
        ens.rng = rng
        return ens

    @property
    def rng_state(self):
        return self.rng.bit_generator.state

    def moment(self, alpha):
        return float(np.mean(self.wealths ** alpha))

    def copy(self):
        out = ParticleEnsemble.__new__(ParticleEnsemble)
        out.wealths = self.wealths.copy()
        out.n = self.n
        out.rng = np.random.default_rng()
        out.rng.bit_generator.state = self.rng.bit_generator.state
        out.time = self.time
        out.stats = dict(self.stats)
        return out


def _chunk_generators(e, n_chunks):
    if n_chunks == 1:
        return [e.rng]
    seeds = e.rng.integers(0, 2 ** 63, size=n_chunks)
    return [np.random.default_rng(int(s)) for s in seeds]


def _chunks(k, n_chunks):
    bounds = np.linspace(0, k, n_chunks + 1).astype(int)
    return list(zip(bounds[:-1], bounds[1:]))


def _check_bound(dt, B, on_overflow):
    q = dt * B
    if q <= 1.0:
        return 1
    if on_overflow == "substep":
        return int(math.ceil(q))
    raise AcceptanceBoundError(
        f"dt * B = {q:.4g} exceeds 1 (B = {B:.4g}); reduce dt")


def _substeps(e, dt, bound, advance):
    """Cover ``dt`` with sweeps short enough for the bound at their start.

    The bound is recomputed before every piece because trades can raise the
    largest wealth within the interval.
    """
    t0, left, pieces = e.time, dt, 0
    while left > 0:
        B = bound()
        h = left if B * left <= 1.0 else min(left, 0.999 / B)
        advance(h)
        left -= h
        pieces += 1
    e.stats["substeps"] += pieces - 1
    e.time = t0 + dt


def linear_bound(e, rule, p):
    """Candidate rate bound for the linear model on the tilted route."""
    if p.delta == 0:
        return p.kappa_kernel
    wmax = float(e.wealths.max())
    return p.kappa_kernel * rule.market.moment(p.delta) * wmax ** p.delta


def step_linear(e, rule, p, dt, n_chunks=1, on_overflow="raise"):
    """One sweep of the linear market model; updates ``e`` in place and returns it.

    With a tilted market sampler, candidates are selected at rate
    ``kappa M_delta w_max^delta`` and accepted with ``(w/w_max)^delta``, the
    market partner being drawn from ``v^delta E(v) / M_delta``.  This gives each
    agent the interaction law ``kappa (v w)^delta E(v) dv dt`` exactly.
    Otherwise a fresh ``v ~ E`` is drawn for every agent and thinned against
    ``B = kappa (w_max v_max)^delta``.
    """
    if not isinstance(rule, LinearMarket):
        raise ParameterError("step_linear needs a LinearMarket rule")
    check_scalar(dt, "dt", low=0, include_low=False)
    if rule.market.has_tilted_sampler or p.delta == 0:
        if _check_bound(dt, linear_bound(e, rule, p), on_overflow) > 1:
            _substeps(e, dt, lambda: linear_bound(e, rule, p),
                      lambda h: _linear_tilted(e, rule, p, h, n_chunks))
        else:
            _linear_tilted(e, rule, p, dt, n_chunks)
    else:
        _linear_direct(e, rule, p, dt, n_chunks, on_overflow)
    return e


def _apply_linear(e, idx, v, rule, rng, delta):
    w = e.wealths[idx]
    if delta > 0:
        # (v w)^delta (v - w) <= v^(1 + 2 delta) on every accepted pair
        lhs = (v * w) ** delta * (v - w)
        rhs = v ** (1 + 2 * delta)
        if np.any(lhs > rhs * (1 + 1e-12) + 1e-300):
            raise InvariantViolation("kernel inequality failed on a sample")
    eta = rule.eta.sample(rng, len(idx))
    new = (1.0 - rule.lam + eta) * w + rule.lam * v
    if np.any(new < 0):
        raise InvariantViolation("negative wealth after a linear trade")
    e.wealths[idx] = new


def _linear_tilted(e, rule, p, dt, n_chunks):
    B = linear_bound(e, rule, p)
    e.stats["sweeps"] += 1
    if B > 0:
        k = e.rng.binomial(e.n, dt * B)
        cand = e.rng.choice(e.n, size=k, replace=False) if k else np.empty(0, int)
        e.stats["candidates"] += int(k)
        wmax = float(e.wealths.max())
        for rng, (a, b) in zip(_chunk_generators(e, n_chunks),
                               _chunks(len(cand), n_chunks)):
            idx = cand[a:b]
            if p.delta > 0:
                acc = rng.random(len(idx)) < (e.wealths[idx] / wmax) ** p.delta
                idx = idx[acc]
            v = (rule.market.sample_tilted(rng, len(idx), p.delta) if p.delta > 0
                 else rule.market.sample(rng, len(idx)))
            _apply_linear(e, idx, v, rule, rng, p.delta)
            e.stats["accepted"] += len(idx)
    e.time += dt


def _linear_direct(e, rule, p, dt, n_chunks, on_overflow):
    v_all = rule.market.sample(e.rng, e.n)
    if np.any(v_all < 0):
        raise InvariantViolation("market sampler returned negative wealth")
    B = p.kappa_kernel * (float(e.wealths.max()) * float(v_all.max())) ** p.delta
    k = _check_bound(dt, B, on_overflow)
    if k > 1:
        # fresh market draws per piece, so a piece may split again
        e.stats["substeps"] += k - 1
        for _ in range(k):
            _linear_direct(e, rule, p, dt / k, n_chunks, on_overflow)
        return
    e.stats["sweeps"] += 1
    if B > 0:
        cand = np.flatnonzero(e.rng.random(e.n) < dt * B)
        e.stats["candidates"] += len(cand)
        for rng, (a, b) in zip(_chunk_generators(e, n_chunks),
                               _chunks(len(cand), n_chunks)):
            idx = cand[a:b]
            kv = kernel_value(v_all[idx], e.wealths[idx], p.delta, p.kappa_kernel)
            idx = idx[rng.random(len(idx)) < kv / B]
            _apply_linear(e, idx, v_all[idx], rule, rng, p.delta)
            e.stats["accepted"] += len(idx)
    e.time += dt


def bilinear_bound(e, p):
    if p.delta == 0:
        return p.kappa_kernel
    return p.kappa_kernel * float(e.wealths.max()) ** (2 * p.delta)


def step_bilinear(e, rule, p, dt, n_chunks=1, on_overflow="raise"):
    """One sweep of a binary interaction model; updates ``e`` in place and returns it.

    ``Binomial(n // 2, dt B)`` disjoint candidate pairs are drawn uniformly
    at random (the same law as a random perfect matching thinned with
    probability ``dt B``) and each is accepted with ``(v w)^delta / w_max^(2 delta)``.
    """
    if not isinstance(rule, BILINEAR_RULES):
        raise ParameterError("step_bilinear needs a binary interaction rule")
    if e.n < 2:
        raise ParameterError("binary interactions need at least two agents")
    check_scalar(dt, "dt", low=0, include_low=False)
    if _check_bound(dt, bilinear_bound(e, p), on_overflow) > 1:
        _substeps(e, dt, lambda: bilinear_bound(e, p),
                  lambda h: _bilinear_sweep(e, rule, p, h, n_chunks))
    else:
        _bilinear_sweep(e, rule, p, dt, n_chunks)
    return e


def _bilinear_sweep(e, rule, p, dt, n_chunks):
    B = bilinear_bound(e, p)
    e.stats["sweeps"] += 1
    if B > 0:
        npairs = e.rng.binomial(e.n // 2, dt * B)
        sel = e.rng.choice(e.n, size=2 * npairs, replace=False)
        I, J = sel[:npairs], sel[npairs:]
        e.stats["candidates"] += int(npairs)
        bound = float(e.wealths.max()) ** (2 * p.delta)
        for rng, (a, b) in zip(_chunk_generators(e, n_chunks),
                               _chunks(npairs, n_chunks)):
            i, j = I[a:b], J[a:b]
            if p.delta > 0:
                ratio = (e.wealths[i] * e.wealths[j]) ** p.delta / bound
                acc = rng.random(len(i)) < ratio
                i, j = i[acc], j[acc]
            _apply_pair(e, i, j, rule, rng)
            e.stats["accepted"] += len(i)
    e.time += dt


def _apply_pair(e, i, j, rule, rng):
    v, w = e.wealths[i], e.wealths[j]
    s = v + w
    if isinstance(rule, GamblingConservative):
        vs = rule.omega.sample(rng, len(i)) * s
        ws = s - vs
    elif isinstance(rule, GamblingMeanConservative):
        vs = rule.sample_omega(rng, len(i)) * s
        ws = rule.sample_omega(rng, len(i)) * s
    else:
        n = len(i)
        vs = (1.0 - rule.lam + rule.eta.sample(rng, n)) * v + rule.lam * w
        ws = (1.0 - rule.lam + rule.eta.sample(rng, n)) * w + rule.lam * v
    if np.any(vs < 0) or np.any(ws < 0):
        raise InvariantViolation("negative wealth after a binary trade")
    # realised change of total wealth; its squares add up to the quadratic
    # variation of the ensemble mean (scaled by n^2)
    d = (vs + ws) - s
    e.stats["sum_sq_total_change"] += float(d @ d)
    e.wealths[i] = vs
    e.wealths[j] = ws


def step(e, rule, p, dt, **kw):
    if isinstance(rule, LinearMarket):
        return step_linear(e, rule, p, dt, **kw)
    return step_bilinear(e, rule, p, dt, **kw)


def sweep_bound(e, rule, p):
    return linear_bound(e, rule, p) if isinstance(rule, LinearMarket) \
        else bilinear_bound(e, p)


# ---------------------------------------------------------------------------
# Moments, bounds and statistics
# ---------------------------------------------------------------------------

def jackknife(values, statistic, n_blocks=50):
    """Delete-a-block jackknife ``(estimate, standard error)`` of ``statistic(values)``."""
    values = np.asarray(values)
    n = len(values)
    g = min(n_blocks, n)
    if g < 2:
        return float(statistic(values)), math.nan
    blocks = np.array_split(np.arange(n), g)
    full = float(statistic(values))
    mask = np.ones(n, bool)
    loo = np.empty(g)
    for b, idx in enumerate(blocks):
        mask[idx] = False
        loo[b] = statistic(values[mask])
        mask[idx] = True
    se = math.sqrt((g - 1) / g * float(((loo - loo.mean()) ** 2).sum()))
    return full, se


@dataclass
class MomentSeries:
    times: np.ndarray
    alphas: tuple
    values: np.ndarray     # shape (len(times), len(alphas))
    se: np.ndarray

    def m(self, alpha):
        j = self.alphas.index(alpha)
        return self.values[:, j], self.se[:, j]


def moment_series(history, alphas=(0.0, 1.0, 2.0), n_blocks=50):
    """Sample moments ``m_alpha(t)`` with jackknife errors.

    ``history`` is a sequence of ``(t, wealth array)`` pairs.
    """
    alphas = tuple(float(a) for a in alphas)
    if any(a < 0 for a in alphas):
        raise ParameterError("moment orders must be nonnegative")
    times, vals, ses = [], [], []
    for t, w in history:
        w = np.asarray(w, float)
        row, err = [], []
        for a in alphas:
            x = w ** a
            est, se = jackknife(x, np.mean, n_blocks)
            row.append(est)
            err.append(se)
        times.append(t)
        vals.append(row)
        ses.append(err)
    return MomentSeries(np.array(times), alphas, np.array(vals), np.array(ses))


def mean_bound(m1_initial, market, delta):
    """Uniform bound on the mean: ``max(m_1(0), M_{1+delta} / M_delta)``."""
    return max(m1_initial, market.target_mean(delta))


def mean_derivative_bound(m1, rule, p):
    """Right-hand side ``kappa lam m1^delta (M_{1+delta} - m1 M_delta)``."""
    mk = rule.market
    d = p.delta
    return p.kappa_kernel * rule.lam * m1 ** d * (mk.moment(1 + d)
                                                 - m1 * mk.moment(d))


def second_moment_bar(rule, delta):
    """The bounding value of the second moment.

    Root of ``-A M_d x^2 + 2 lam (1-lam) M_{1+d} x + M_{2+d}`` in ``x = sqrt(m_2)``
    with ``A = 2 lam - sigma - lam^2``.  The constant term keeps ``M_{2+d}``
    without the factor ``lam^2`` it carries in the exact moment equation, so
    the bound is conservative.
    """
    lam, sigma = rule.lam, rule.eta.variance
    A = 2 * lam - sigma - lam ** 2
    if not A > 0:
        raise ParameterError("second moment bound needs sigma + lam^2 < 2 lam")
    mk = rule.market
    Md, M1d, M2d = (mk.moment(delta), mk.moment(1 + delta),
                    mk.moment(2 + delta))
    b = lam * (1 - lam) * M1d
    return ((b + math.sqrt(b * b + Md * M2d * A)) / (Md * A)) ** 2


def remainder_statistic(e, rule, p, epsilon):
    """``eps^2 kappa lam^2 <(v w)^delta (v - w)^2>`` over ensemble and market.

    The market average is taken in closed form, so the only randomness is
    the ensemble itself.
    """
    mk, d = rule.market, p.delta
    w = e.wealths
    inner = w ** d * (mk.moment(2 + d) - 2 * w * mk.moment(1 + d)
                      + w * w * mk.moment(d))
    return epsilon ** 2 * p.kappa_kernel * rule.lam ** 2 * float(inner.mean())


def mean_standard_error(e, n_blocks=50):
    """SE of the ensemble mean around its initial value.

    Adds the sampling error of the snapshot to the realised quadratic
    variation of the mean accumulated by non-conservative binary trades.
    """
    _, se = jackknife(e.wealths, np.mean, n_blocks)
    qv = e.stats["sum_sq_total_change"] / e.n ** 2
    return math.sqrt(se * se + qv)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def run(e, rule, p, t_end, dt=None, safety=0.5, record_every=None,
        n_chunks=1, on_overflow="raise", callback=None):
    """Advance ``e`` to model time ``t_end``.

    With ``dt=None`` each sweep uses ``safety / B``.  Returns the list of
    ``(t, wealth copy)`` pairs recorded every ``record_every``.
    """
    check_rule_params(rule, p)
    if dt is None and isinstance(rule, LinearMarket) and p.delta > 0 \
            and not rule.market.has_tilted_sampler:
        # the direct route's bound depends on the market draw of each sweep
        on_overflow = "substep"
    history = [(e.time, e.wealths.copy())] if record_every else []
    next_rec = e.time + record_every if record_every else math.inf
    while e.time < t_end - 1e-12:
        B = sweep_bound(e, rule, p)
        h = dt if dt is not None else (safety / B if B > 0 else t_end - e.time)
        h = min(h, t_end - e.time)
        step(e, rule, p, h, n_chunks=n_chunks, on_overflow=on_overflow)
        if callback is not None:
            callback(e)
        if e.time >= next_rec - 1e-12:
            history.append((e.time, e.wealths.copy()))
            next_rec += record_every
    return history


def grazing_reference(rule, p):
    """Parameters and time scale of the limiting Fokker-Planck equation.

    For the linear model the limit is ``f_t = c [(w^(2+d) f)_ww
    + mu (w^d (w - m) f)_w]`` with ``m = M_{1+d}/M_d`` and
    ``c = kappa sigma M_d / 2``.
    """
    if not isinstance(rule, LinearMarket):
        raise ParameterError("the linear grazing limit needs a LinearMarket rule")
    ref = rule.model_params(p.delta, p.kappa_kernel)
    scale = p.kappa_kernel * rule.eta.variance * rule.market.moment(p.delta) / 2
    return ref, scale


def check_grazing_scaling(rule, epsilon):
    check_scalar(epsilon, "epsilon", low=0, high=0.5, include_low=False)
    lam, sigma = rule.lam, rule.eta.variance
    if not epsilon * sigma + epsilon ** 2 * lam ** 2 < 2 * epsilon * lam:
        raise ParameterError(
            f"scaled parameters violate eps sigma + eps^2 lam^2 < 2 eps lam "
            f"(eps={epsilon}, sigma={sigma}, lam={lam})")


def run_grazing(e, rule, p, epsilon, t_end, grid=None, record_every=None,
                safety=0.5, n_chunks=1, reference=None):
    """Grazing-scaled run to macroscopic time ``t_end``.

    The rule is rescaled by ``lam -> eps lam`` and ``eta -> sqrt(eps) eta``;
    each kinetic sweep of length ``dt`` advances the macroscopic clock by
    ``eps dt``.  Moments, and relative entropy and L1 distance of the
    histogram on ``grid`` against ``reference`` (a grid density), are
    recorded every ``record_every``.  Returns ``(DecaySeries, e)``; the
    ensemble's ``time`` is macroscopic.
    """
    check_grazing_scaling(rule, epsilon)
    check_rule_params(rule, p)
    scaled = rule.scaled(epsilon)
    ps = p.with_(lam=scaled.lam, sigma=scaled.eta.variance) \
        if isinstance(rule, (LinearMarket, BinaryCPT)) else p
    series = diagnostics.DecaySeries()

    def record():
        row = dict(t=e.time, mass=1.0, mean=e.moment(1.0), m2=e.moment(2.0),
                   H=math.nan, I_delta=math.nan, l1_to_eq=math.nan)
        if grid is not None and reference is not None:
            hist = histogram_density(e, grid, smooth=True)
            row["H"] = diagnostics.relative_entropy(hist, reference)
            row["l1_to_eq"] = diagnostics.l1_distance(hist, reference)
            diagnostics.check_csiszar_kullback(row["H"], row["l1_to_eq"])
        series.append(**row)

    if record_every:
        record()
        next_rec = e.time + record_every
    while e.time < t_end - 1e-12:
        B = sweep_bound(e, scaled, ps)
        h_macro = min(epsilon * safety / B, t_end - e.time)
        macro0 = e.time
        step(e, scaled, ps, h_macro / epsilon, n_chunks=n_chunks)
        e.time = macro0 + h_macro
        if record_every and e.time >= next_rec - 1e-12:
            record()
            next_rec += record_every
    if record_every and (len(series) == 0 or series["t"][-1] < e.time):
        record()
    return series, e


def histogram_density(e, grid, smooth=False):
    """Histogram of the ensemble on ``grid`` as a grid density.

    ``smooth=True`` adds ``1 / (n h_i)`` to every cell and renormalises, so
    the histogram is positive wherever the grid is (used for entropies).
    """
    from .fokker_planck import GridDensity
    vals, _ = grid.bin(e.wealths)
    if smooth:
        vals = vals + 1.0 / (e.n * grid.widths)
        vals /= vals @ grid.widths
    return GridDensity(vals, grid, e.time)


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------

class KineticWealthSimulator(TransformerMixin, BaseEstimator):
    """Estimator-style front end: ``fit`` evolves an initial wealth sample.

    ``X`` holds one agent per row (a single column of wealths).  After
    ``fit``, ``wealths_`` is the final sample and ``moments_`` the recorded
    :class:`MomentSeries`.  ``transform`` evolves a new sample with the
    same settings and seed and returns the final wealths as a column.
    """

    def __init__(self, rule="linear", delta=1.0, kappa_kernel=1.0, lam=0.1,
                 r=0.05, market_shape=4.0, market_mean=1.0, omega_b=1.0, a=3.0,
                 t_end=1.0, dt=None, record_every=None, epsilon=None,
                 n_chunks=1, random_state=None):
        self.rule = rule
        self.delta = delta
        self.kappa_kernel = kappa_kernel
        self.lam = lam
        self.r = r
        self.market_shape = market_shape
        self.market_mean = market_mean
        self.omega_b = omega_b
        self.a = a
        self.t_end = t_end
        self.dt = dt
        self.record_every = record_every
        self.epsilon = epsilon
        self.n_chunks = n_chunks
        self.random_state = random_state

    def _build(self):
        eta = TwoPoint(self.r)
        if self.rule == "linear":
            rule = LinearMarket(self.lam, eta,
                                MarketSpec.gamma(self.market_shape, self.market_mean))
        elif self.rule == "gambling":
            rule = GamblingConservative(SymmetricOmega(self.omega_b))
        elif self.rule == "gambling-mean":
            rule = GamblingMeanConservative(self.a)
        elif self.rule == "binary":
            rule = BinaryCPT(self.lam, eta)
        else:
            raise ParameterError(f"unknown rule {self.rule!r}")
        p = ModelParams(lam=self.lam, sigma=eta.variance, delta=self.delta,
                        kappa_kernel=self.kappa_kernel)
        return rule, p

    def _evolve(self, X):
        X = np.asarray(X, dtype=float)
        w = X.ravel() if X.ndim == 1 or X.shape[1] == 1 else None
        if w is None:
            raise ParameterError("X must have a single column of wealths")
        rule, p = self._build()
        e = ParticleEnsemble(w, seed=self.random_state)
        if self.epsilon is not None:
            run_grazing(e, rule, p, self.epsilon, self.t_end)
            history = [(e.time, e.wealths.copy())]
        else:
            history = run(e, rule, p, self.t_end, dt=self.dt,
                          record_every=self.record_every, n_chunks=self.n_chunks)
            if not history:
                history = [(e.time, e.wealths.copy())]
        return e, rule, p, history

    def fit(self, X, y=None):
        e, rule, p, history = self._evolve(X)
        self.rule_, self.params_ = rule, p
        self.ensemble_ = e
        self.wealths_ = e.wealths.copy()
        self.moments_ = moment_series(history)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "wealths_")
        e, *_ = self._evolve(X)
        return e.wealths.reshape(-1, 1)


def ergodic_average(e, rule, p, t_start, t_end, every, statistic,
                    n_batches=10, **run_kw):
    """Time average of ``statistic(wealths)`` over ``[t_start, t_end]``.

    Runs ``e`` to ``t_start`` first, then samples every ``every`` time units.
    The standard error comes from batch means over ``n_batches`` contiguous
    batches, which absorbs the correlation between nearby snapshots.
    ``statistic`` may return a scalar or an array; returns ``(mean, se)``.
    """
    run(e, rule, p, t_start, **run_kw)
    samples = []
    t = t_start
    while t < t_end - 1e-12:
        t = min(t + every, t_end)
        run(e, rule, p, t, **run_kw)
        samples.append(np.asarray(statistic(e.wealths), dtype=float))
    samples = np.array(samples)
    if len(samples) < 2 * n_batches:
        raise ParameterError("need at least two snapshots per batch")
    batches = np.array([b.mean(axis=0) for b in
                        np.array_split(samples, n_batches)])
    est = samples.mean(axis=0)
    se = batches.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return est, se
