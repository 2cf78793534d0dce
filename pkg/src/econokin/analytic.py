"""Closed-form equilibria, potentials and constants.

Everything in this module is a pure function of its inputs.  The other
modules use these densities as reference solutions and as test oracles.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from ._validation import check_scalar
from .exceptions import DomainError, NegativeDensityError, ParameterError

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-10
QUAD_LIMIT = 200


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Trade and kernel constants.

    ``mu`` is always recomputed as ``2 * lam / sigma``.  ``delta == 0`` is the
    Maxwellian reference case; operations that need uniform convexity of the
    transformed potential reject it.
    """

    lam: float
    sigma: float
    m: float = 1.0
    delta: float = 1.0
    kappa_kernel: float = 1.0

    def __post_init__(self):
        check_scalar(self.lam, "lam", low=0, high=1, include_low=False,
                     include_high=False)
        check_scalar(self.sigma, "sigma", low=0, include_low=False)
        check_scalar(self.m, "m", low=0, include_low=False)
        check_scalar(self.delta, "delta", low=0, high=1)
        check_scalar(self.kappa_kernel, "kappa_kernel", low=0,
                     include_low=False)

    @classmethod
    def from_mu(cls, mu, m=1.0, delta=1.0, lam=0.5, kappa_kernel=1.0):
        """Build parameters from the drift ratio; ``sigma`` is ``2 lam / mu``."""
        mu = check_scalar(mu, "mu", low=0, include_low=False)
        return cls(lam=lam, sigma=2.0 * lam / mu, m=m, delta=delta,
                   kappa_kernel=kappa_kernel)

    @property
    def mu(self):
        return 2.0 * self.lam / self.sigma

    @property
    def reference_mode(self):
        return self.delta == 0

    def require_mu_above_one(self):
        if not self.mu > 1:
            raise ParameterError(
                f"mu = {self.mu} must exceed 1 for delta-dependent equilibria")

    def second_moment_bounded(self):
        """True when ``sigma + lam**2 < 2 lam`` (negative w**2 coefficient)."""
        return self.sigma + self.lam ** 2 < 2.0 * self.lam

    def with_(self, **changes):
        kw = dict(lam=self.lam, sigma=self.sigma, m=self.m, delta=self.delta,
                  kappa_kernel=self.kappa_kernel)
        kw.update(changes)
        return ModelParams(**kw)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

class AnalyticDensity:
    """Base for closed-form densities.

    Subclasses provide ``logpdf`` on the interior of their domain, a ``mode``
    used as a quadrature split point and ``tail_exponent`` (the order above
    which moments diverge; ``inf`` for light tails).
    """

    domain = "positive"
    tail_exponent = math.inf

    def logpdf(self, w):
        raise NotImplementedError

    def pdf(self, w):
        w = np.asarray(w, dtype=float)
        self._check_domain(w)
        with np.errstate(over="ignore", under="ignore"):
            return np.exp(self.logpdf(w))

    def _check_domain(self, w):
        if self.domain == "positive" and np.any(w <= 0):
            raise DomainError(
                f"{type(self).__name__} is defined for w > 0 only")
        if not np.all(np.isfinite(w)):
            raise DomainError("evaluation points must be finite")

    @property
    def mode(self):
        raise NotImplementedError

    def split_points(self):
        c = self.mode
        if self.domain == "real":
            return [-math.inf, c - 20.0, c - 5.0, c, c + 5.0, c + 20.0,
                    math.inf]
        return [0.0, c * 1e-3, c * 0.1, c, c * 10.0, c * 1e3, math.inf]

    def integrate(self, func):
        """Integrate ``func(w) * pdf(w)`` over the domain, split at the mode."""
        pts = self.split_points()

        def integrand(w):
            if self.domain == "positive" and w <= 0:
                return 0.0
            p = math.exp(self.logpdf(w)) if np.isfinite(w) else 0.0
            return func(w) * p if p > 0 else 0.0

        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            val, _ = integrate.quad(integrand, a, b, epsabs=QUAD_EPSABS,
                                    epsrel=QUAD_EPSREL, limit=QUAD_LIMIT)
            total += val
        return total

    def mean(self):
        return density_moments(self, 1.0)

    def var(self):
        m1 = density_moments(self, 1.0)
        m2 = density_moments(self, 2.0)
        return m2 - m1 * m1


def _inverse_gamma_logpdf(w, shape, scale):
    w = np.asarray(w, dtype=float)
    return (shape * math.log(scale) - special.gammaln(shape)
            - scale / w - (shape + 1.0) * np.log(w))


@dataclass(frozen=True)
class InverseGammaDelta(AnalyticDensity):
    """Equilibrium of the linear Fokker-Planck equation with kernel exponent delta.

    An inverse Gamma law with shape ``1 + delta + mu`` and scale ``mu m``.
    """

    mu: float
    m: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        check_scalar(self.mu, "mu", low=0, include_low=False)
        check_scalar(self.m, "m", low=0, include_low=False)
        check_scalar(self.delta, "delta", low=0, high=1)

    @classmethod
    def from_params(cls, p):
        return cls(mu=p.mu, m=p.m, delta=p.delta)

    @property
    def shape(self):
        return 1.0 + self.delta + self.mu

    @property
    def scale(self):
        return self.mu * self.m

    @property
    def tail_exponent(self):
        return self.shape

    @property
    def mode(self):
        return self.scale / (self.shape + 1.0)

    def logpdf(self, w):
        return _inverse_gamma_logpdf(w, self.shape, self.scale)

    def sf(self, w):
        """Mass above ``w`` in closed form."""
        return special.gammainc(self.shape, self.scale / np.asarray(w, float))

    def cdf(self, w):
        return special.gammaincc(self.shape, self.scale / np.asarray(w, float))


@dataclass(frozen=True)
class GammaGambling(AnalyticDensity):
    """Unit-mean equilibrium of conservative gambling with uniform fraction."""

    delta: float

    def __post_init__(self):
        check_scalar(self.delta, "delta", low=0, high=1, include_high=False)

    @property
    def mode(self):
        # density is monotone (singular at 0 for delta > 0); split at the mean
        return 1.0

    def logpdf(self, w):
        k = 1.0 - self.delta
        w = np.asarray(w, dtype=float)
        return (k * math.log(k) - special.gammaln(k) - self.delta * np.log(w)
                - k * w)

    def cdf(self, w):
        k = 1.0 - self.delta
        return special.gammainc(k, k * np.asarray(w, float))


@dataclass(frozen=True)
class InverseGammaGambling(AnalyticDensity):
    """Unit-mean equilibrium of the mean-conservative gambling game."""

    a: float
    delta: float = 0.0

    def __post_init__(self):
        check_scalar(self.a, "a", low=1, include_low=False)
        check_scalar(self.delta, "delta", low=0, high=1)
        if self.a + self.delta - 1.0 <= 0:
            raise ParameterError("a + delta must exceed 1")

    @property
    def shape(self):
        return self.a + self.delta

    @property
    def scale(self):
        return self.a + self.delta - 1.0

    @property
    def tail_exponent(self):
        return self.shape

    @property
    def mode(self):
        return self.scale / (self.shape + 1.0)

    def logpdf(self, w):
        return _inverse_gamma_logpdf(w, self.shape, self.scale)

    def cdf(self, w):
        return special.gammaincc(self.shape, self.scale / np.asarray(w, float))


@dataclass(frozen=True)
class GeneralizedGamma(AnalyticDensity):
    """``nu y**(k-1) exp(-(y/theta)**nu) / (theta**k Gamma(k/nu))``."""

    kappa_shape: float
    theta: float
    nu: float

    def __post_init__(self):
        for name in ("kappa_shape", "theta", "nu"):
            check_scalar(getattr(self, name), name, low=0, include_low=False)

    @classmethod
    def from_params(cls, p):
        return cls(*ggamma_params(p))

    @property
    def mode(self):
        k, th, nu = self.kappa_shape, self.theta, self.nu
        if k <= 1:
            return th
        return th * ((k - 1.0) / nu) ** (1.0 / nu)

    def logpdf(self, y):
        k, th, nu = self.kappa_shape, self.theta, self.nu
        y = np.asarray(y, dtype=float)
        return (math.log(nu) - k * math.log(th) - special.gammaln(k / nu)
                + (k - 1.0) * np.log(y) - (y / th) ** nu)

    def split_points(self):
        c = self.mode
        return [0.0, c * 0.25, c * 0.5, c, c * 2.0, c * 4.0, math.inf]

    def cdf(self, y):
        k, th, nu = self.kappa_shape, self.theta, self.nu
        return special.gammainc(k / nu, (np.asarray(y, float) / th) ** nu)


@dataclass(frozen=True)
class ExpGibbs(AnalyticDensity):
    """Unit-mean exponential (Gibbs) law."""

    @property
    def mode(self):
        return 1.0

    def logpdf(self, w):
        return -np.asarray(w, dtype=float)


@dataclass(frozen=True)
class LogTransformedDelta0(AnalyticDensity):
    """Maxwellian equilibrium pushed forward by ``y = log x``; lives on R."""

    mu: float
    m: float = 1.0
    domain = "real"

    def __post_init__(self):
        check_scalar(self.mu, "mu", low=0, include_low=False)
        check_scalar(self.m, "m", low=0, include_low=False)

    @property
    def mode(self):
        return math.log(self.mu * self.m / (1.0 + self.mu))

    def logpdf(self, y):
        mu, m = self.mu, self.m
        y = np.asarray(y, dtype=float)
        logc = (1.0 + mu) * math.log(mu * m) - special.gammaln(1.0 + mu)
        with np.errstate(over="ignore"):
            return logc - ((1.0 + mu) * y + mu * m * np.exp(-y))


def eval_pdf(d, w):
    """Evaluate density ``d`` at ``w`` (scalar or array)."""
    out = d.pdf(w)
    return float(out) if np.ndim(out) == 0 else out


def density_moments(d, order):
    """Moment of the given order by quadrature; ``inf`` past the tail exponent."""
    order = check_scalar(order, "order", low=0)
    if order >= d.tail_exponent:
        return math.inf
    if order == 0:
        return d.integrate(lambda w: 1.0)
    return d.integrate(lambda w: w ** order)


# ---------------------------------------------------------------------------
# Constants of the transformed problem
# ---------------------------------------------------------------------------

def rho_delta(p):
    """Uniform convexity bound of the transformed potential.

    Evaluated in log form so that the ``delta -> 1`` limit ``m mu / 2`` is
    approached continuously.
    """
    delta, m, mu = p.delta, p.m, p.mu
    if delta == 0:
        raise ParameterError(
            "delta = 0: the transformed potential has no uniform convexity "
            "(W'' = mu m exp(-y) has infimum 0)")
    if delta == 1:
        return m * mu / 2.0
    log_rho = (math.log(delta / 2.0) + delta * math.log(m * mu)
               + (1.0 - delta) * math.log(1.0 + delta / 2.0 + mu)
               + delta * math.log(2.0 - delta)
               - (1.0 - delta) * math.log1p(-delta)
               - 2.0 * delta * math.log(delta))
    return math.exp(log_rho)


def ggamma_params(p):
    """``(kappa_shape, theta, nu)`` of the transformed equilibrium."""
    delta, m, mu = p.delta, p.m, p.mu
    if delta == 0:
        raise ParameterError(
            "delta = 0 maps to the log transform; no generalized Gamma form")
    nu = 2.0 / delta
    kappa_shape = nu * (1.0 + delta + mu)
    theta = 2.0 / (delta * (mu * m) ** (delta / 2.0))
    return kappa_shape, theta, nu


def rho_ggamma(kappa_shape, theta, nu):
    """Convexity constant written with generalized Gamma parameters.

    ``nu == 2`` is a removable singularity with value ``2 / theta**2``.
    """
    check_scalar(kappa_shape, "kappa_shape", low=2, include_low=False)
    check_scalar(theta, "theta", low=0, include_low=False)
    check_scalar(nu, "nu", low=2)
    if nu == 2:
        return 2.0 / theta ** 2
    log_rho = (-2.0 * math.log(theta)
               + (1.0 - 2.0 / nu) * math.log(kappa_shape - 1.0)
               + math.log(nu)
               + (2.0 / nu) * math.log(nu * (nu - 1.0) / 2.0)
               + (2.0 / nu - 1.0) * math.log(nu - 2.0))
    return math.exp(log_rho)


# ---------------------------------------------------------------------------
# Change of variables
# ---------------------------------------------------------------------------

def _check_x(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DomainError("x must be positive and finite")
    return x


def _ret(a):
    return float(a) if np.ndim(a) == 0 else a


def to_transformed(x, delta):
    """``y = (2/delta) x**(-delta/2)``, or ``log x`` when ``delta == 0``."""
    x = _check_x(x)
    check_scalar(delta, "delta", low=0, high=1)
    if delta == 0:
        return _ret(np.log(x))
    return _ret((2.0 / delta) * x ** (-delta / 2.0))


def from_transformed(y, delta):
    """Inverse of :func:`to_transformed`."""
    y = np.asarray(y, dtype=float)
    check_scalar(delta, "delta", low=0, high=1)
    if delta == 0:
        return _ret(np.exp(y))
    if np.any(y <= 0):
        raise DomainError("y must be positive for delta > 0")
    return _ret((delta * y / 2.0) ** (-2.0 / delta))


def jacobian(x, delta):
    """``|dy/dx|`` of the transform."""
    x = _check_x(x)
    check_scalar(delta, "delta", low=0, high=1)
    return _ret(x ** (-1.0 - delta / 2.0))


# ---------------------------------------------------------------------------
# Transformed potential
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """Potential of the unit-diffusion equation, normalised so ``W(1) = 0``.

    For ``delta > 0`` it lives on ``y > 0``; with ``delta == 0`` (reference
    mode) on the whole line.
    """

    mu: float
    m: float = 1.0
    delta: float = 1.0
    y0: float = field(default=1.0, repr=False)

    @classmethod
    def from_params(cls, p):
        return cls(mu=p.mu, m=p.m, delta=p.delta)

    @property
    def delta0_mode(self):
        return self.delta == 0

    def _coeffs(self):
        d = self.delta
        a = self.mu * self.m * (d / 2.0) ** (2.0 / d - 1.0)
        b = (2.0 / d) * (1.0 + self.mu + d / 2.0)
        return a, b

    def Wp(self, y):
        y = np.asarray(y, dtype=float)
        if self.delta0_mode:
            return _ret(1.0 + self.mu - self.mu * self.m * np.exp(-y))
        a, b = self._coeffs()
        p = 2.0 / self.delta - 1.0
        return _ret(a * y ** p - b / y)

    def Wpp(self, y):
        y = np.asarray(y, dtype=float)
        if self.delta0_mode:
            return _ret(self.mu * self.m * np.exp(-y))
        a, b = self._coeffs()
        p = 2.0 / self.delta - 1.0
        return _ret(a * p * y ** (p - 1.0) + b / y ** 2)

    def W(self, y):
        y = np.asarray(y, dtype=float)
        y0 = self.y0
        if self.delta0_mode:
            mu, m = self.mu, self.m
            return _ret((1.0 + mu) * (y - y0)
                        + mu * m * (np.exp(-y) - math.exp(-y0)))
        a, b = self._coeffs()
        q = 2.0 / self.delta
        return _ret((a / q) * (y ** q - y0 ** q) - b * np.log(y / y0))


# ---------------------------------------------------------------------------
# Steady states from coefficients
# ---------------------------------------------------------------------------

class _NotIntegrable(Exception):
    pass


def steady_from_coefficients(a, b, x0):
    """Unnormalised steady state ``1 / (a(x) Psi(x))`` of the divergence-form
    equation ``f_t = (d/dx)[(a f)' + b f]``, where ``Psi = exp(int_x0^x b/a)``.
    """
    x0 = check_scalar(x0, "x0", low=0, include_low=False)

    def ratio(y):
        try:
            r = b(y) / a(y)
        except ZeroDivisionError:
            r = math.inf
        if not math.isfinite(r):
            raise _NotIntegrable
        return r

    def density(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(xs)
        for i, xi in enumerate(xs):
            if xi <= 0:
                raise DomainError("steady state evaluated at x <= 0")
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("error", integrate.IntegrationWarning)
                    val, _ = integrate.quad(ratio, x0, xi, epsabs=1e-13,
                                            epsrel=1e-13, limit=QUAD_LIMIT)
            except (_NotIntegrable, integrate.IntegrationWarning):
                val = math.nan
            if not np.isfinite(val):
                raise ParameterError(f"b/a is not integrable on [{x0}, {xi}]")
            out[i] = math.exp(-val) / a(xi)
        return out[0] if np.ndim(x) == 0 else out

    return density


def stationarity_residual(density, p, w, rel_step=1e-5):
    """``d/dw(w^(2+delta) f) + mu w^delta (w - m) f`` by central differences."""
    w = _check_x(w)
    d, mu, m = p.delta, p.mu, p.m
    h = rel_step * w

    def g(x):
        return x ** (2.0 + d) * density.pdf(x)

    deriv = (g(w + h) - g(w - h)) / (2.0 * h)
    return _ret(deriv + mu * w ** d * (w - m) * density.pdf(w))


# ---------------------------------------------------------------------------
# Admissibility of initial data
# ---------------------------------------------------------------------------

@dataclass
class Check:
    value: float
    passed: bool
    note: str = ""


@dataclass
class InitialConditionReport:
    checks: dict

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def failed(self):
        return [k for k, c in self.checks.items() if not c.passed]

    def to_dict(self):
        return {k: {"value": c.value, "passed": c.passed, "note": c.note}
                for k, c in self.checks.items()}


def _truncation_sequence(piece, limits, rtol=1e-6):
    """Integrate ``piece`` over a growing sequence of truncations.

    Returns ``(value, converged)`` where convergence means the last
    increments shrink below ``rtol`` of the running total (or 1e-12).
    """
    values = [piece(lim) for lim in limits]
    incs = np.abs(np.diff(values))
    tol = max(rtol * abs(values[-1]), 1e-12)
    converged = bool(np.all(incs[-3:] <= tol))
    return (values[-1] if converged else math.inf), converged


def validate_initial_condition(f0, p, alphas=(0.5, 1.0), mass_tol=1e-6,
                               flux_tol=1e-6):
    """Check Feller-class boundary behaviour and the L1-decay conditions.

    ``f0`` is a :class:`~econokin.fokker_planck.GridDensity`, an object with
    a vectorised ``logpdf`` (closed-form densities, frozen scipy laws) or a
    vectorised callable on ``(0, inf)``.  Boundary limits of ``f0 / f_eq``
    are reported as values; a finite nonnegative limit passes (a zero limit
    is reported, not judged).
    """
    feq = InverseGammaDelta.from_params(p)
    if hasattr(f0, "grid") and hasattr(f0, "values"):
        return _validate_grid(f0, p, feq, alphas, mass_tol, flux_tol)
    with warnings.catch_warnings():
        # convergence is judged from truncation sequences, not quad's flags
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return _validate_callable(f0, p, feq, alphas, mass_tol, flux_tol)


def _boundary_probes(feq, m, side):
    """Points towards a boundary where the equilibrium is still representable."""
    steps = 10.0 ** -np.arange(1, 16) if side == "left" else 10.0 ** np.arange(1, 16)
    pts = m * steps
    keep = feq.logpdf(pts) > -600.0
    pts = pts[keep]
    return pts if len(pts) else m * steps[:1]


def _validate_callable(f0, p, feq, alphas, mass_tol, flux_tol):
    m = p.m
    if hasattr(f0, "logpdf"):
        logf = lambda x: np.asarray(f0.logpdf(np.asarray(x, float)), float)
        dens = lambda x: np.exp(logf(x))
    else:
        dens = lambda x: np.asarray(f0(np.asarray(x, float)), float)
        logf = None
    ev = lambda x: float(dens(np.asarray([x], float))[0])

    def quad(fun, a, b):
        pts = [q for q in (1.0, feq.mode, m) if a < q < b] or None
        val, _ = integrate.quad(fun, a, b, points=pts, limit=QUAD_LIMIT,
                                epsabs=1e-12, epsrel=1e-10)
        return val

    probe = np.logspace(-3, 3, 2001) * m
    vals = dens(probe)
    if np.any(vals < 0):
        raise NegativeDensityError("initial density takes negative values")
    mass = quad(ev, 0.0, 1.0) + quad(ev, 1.0, 1e3 * m) + quad(ev, 1e3 * m,
                                                              math.inf)
    if abs(mass - 1.0) > mass_tol:
        raise ParameterError(f"initial density has mass {mass}, expected 1")

    checks = {}
    for side in ("left", "right"):
        pts = _boundary_probes(feq, m, side)
        with np.errstate(divide="ignore"):
            lf = logf(pts) if logf is not None else np.log(dens(pts))
        last = lf[-1] - feq.logpdf(pts[-1])
        ratio = math.exp(last) if last < 700 else math.inf
        checks[f"ratio_{side}"] = Check(ratio, bool(np.isfinite(ratio)),
                                        "limit of f0/f_eq at the boundary")

    d, mu = p.delta, p.mu
    for side, x in (("left", m * 1e-4), ("right", m * 1e4)):
        h = 1e-6 * x
        g = lambda z: z ** (2.0 + d) * ev(z)
        flux = (g(x + h) - g(x - h)) / (2.0 * h) + mu * x ** d * (x - m) * ev(x)
        checks[f"noflux_{side}"] = Check(abs(flux), abs(flux) < flux_tol,
                                         "probability flux near the boundary")

    for alpha in alphas:
        ups = m * 10.0 ** np.arange(2, 16)
        val, ok = _truncation_sequence(
            lambda R: quad(lambda w: ev(w) * w ** alpha, 1.0, R), ups)
        checks[f"moment_{alpha:g}"] = Check(val, ok, "int_1^inf f0 w^alpha")
    lows = 10.0 ** -np.arange(2, 16)
    val, ok = _truncation_sequence(
        lambda e: quad(lambda w: ev(w) / w, e, 1.0), lows)
    checks["inverse_moment"] = Check(val, ok, "int_0^1 f0 / w")

    def plog(w):
        f = ev(w)
        return f * math.log(f) if f > 1.0 else 0.0
    ent = quad(plog, 0.0, 1.0) + quad(plog, 1.0, math.inf)
    checks["entropy_plus"] = Check(ent, bool(np.isfinite(ent)),
                                   "int f0 log+ f0")
    return InitialConditionReport(checks)


def _validate_grid(u, p, feq, alphas, mass_tol, flux_tol):
    grid = u.grid
    f = np.asarray(u.values, float)
    if np.any(f < 0):
        cell = int(np.argmax(f < 0))
        raise NegativeDensityError("initial density has a negative cell",
                                   cell=cell)
    h, c = grid.widths, grid.centers
    mass = float(f @ h)
    if abs(mass - 1.0) > mass_tol:
        raise ParameterError(f"initial density has mass {mass}, expected 1")
    checks = {}
    logeq = feq.logpdf(c)
    with np.errstate(divide="ignore"):
        logr = np.log(f) - logeq
    for side, i in (("left", 0), ("right", -1)):
        ratio = math.exp(logr[i]) if logr[i] < 700 else math.inf
        checks[f"ratio_{side}"] = Check(ratio, bool(np.isfinite(ratio)),
                                        "f0/f_eq in the end cell")
    # flux (w^(2+d) f)' + mu w^d (w - m) f at the first/last interior face;
    # the ratio form is useless here because f0/f_eq can be astronomically large
    d, mu = p.delta, p.mu
    for side, i in (("left", 0), ("right", len(c) - 2)):
        xf = grid.edges[i + 1]
        diff = (c[i + 1] ** (2.0 + d) * f[i + 1]
                - c[i] ** (2.0 + d) * f[i]) / (c[i + 1] - c[i])
        flux = diff + mu * xf ** d * (xf - p.m) * 0.5 * (f[i] + f[i + 1])
        checks[f"noflux_{side}"] = Check(abs(flux), abs(flux) < flux_tol,
                                         "discrete flux next to the end face")
    # on a truncated grid divergence shows up as a large share in the
    # outermost decade
    p_cell = f * h
    top = c >= c[-1] / 10.0
    for alpha in alphas:
        sel = c >= 1.0
        contrib = p_cell * c ** alpha
        tot = float(contrib[sel].sum())
        share = float(contrib[top & sel].sum()) / tot if tot > 0 else 0.0
        checks[f"moment_{alpha:g}"] = Check(tot, share < 1e-3,
                                            "int_1^inf f0 w^alpha")
    sel = c <= 1.0
    contrib = p_cell / c
    tot = float(contrib[sel].sum())
    bottom = c <= c[0] * 10.0
    share = float(contrib[bottom & sel].sum()) / tot if tot > 0 else 0.0
    checks["inverse_moment"] = Check(tot, share < 1e-3, "int_0^1 f0 / w")
    with np.errstate(divide="ignore", invalid="ignore"):
        plog = np.where(f > 1.0, f * np.log(f), 0.0)
    ent = float(plog @ h)
    checks["entropy_plus"] = Check(ent, bool(np.isfinite(ent)),
                                   "int f0 log+ f0")
    return InitialConditionReport(checks)
