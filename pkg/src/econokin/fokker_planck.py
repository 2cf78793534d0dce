"""Finite-volume solvers for the wealth Fokker-Planck equations.

All steppers discretise the ratio form ``f_t = d/dw [A(w) d/dw (f / q)]``
where ``q`` is the known equilibrium and ``A = a q`` with ``a`` the diffusion
coefficient.  The face flux vanishes whenever ``f`` is proportional to ``q``,
so the sampled equilibrium is a discrete fixed point, and the two end faces
carry zero flux so mass is conserved.  Off-diagonal entries of the operator
are nonnegative, which makes backward Euler positivity preserving.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import diagnostics
from ._validation import check_density_values, check_scalar
from .analytic import (GeneralizedGamma, InverseGammaDelta, ModelParams,
                       Potential, ggamma_params, to_transformed)
from .exceptions import (ConvergenceError, InvariantViolation,
                         NegativeDensityError, ParameterError)

TAIL_MASS = 1e-8


# ---------------------------------------------------------------------------
# Grid and densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    edges: np.ndarray
    variable: str = "w"

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or len(e) < 3:
            raise ParameterError("a grid needs at least two cells")
        if not np.all(np.diff(e) > 0):
            raise ParameterError("grid edges must be strictly increasing")
        if not (np.isfinite(e[0]) and np.isfinite(e[-1])):
            raise ParameterError("grid must be bounded")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def log_spaced(cls, lo, hi, n, variable="w"):
        if not 0 < lo < hi:
            raise ParameterError("log-spaced grid needs 0 < lo < hi")
        return cls(np.geomspace(lo, hi, int(n) + 1), variable)

    @classmethod
    def for_params(cls, p, n=512, w_min=None, w_max=None):
        """Default log grid carrying all but ``TAIL_MASS`` of the equilibrium.

        The left end is ``1e-4 m``, moved right to ``mu m / 600`` when that is
        larger (the equilibrium there is about ``exp(-600)`` and finer cells
        would overflow the operator).  The right end starts at ``1e3 m`` and
        is widened until the closed-form tail beyond it is below ``TAIL_MASS``.
        """
        feq = InverseGammaDelta.from_params(p)
        lo = max(p.m * 1e-4, p.mu * p.m / 600.0) if w_min is None else w_min
        if w_max is None:
            hi = p.m * 1e3
            while float(feq.sf(hi)) + float(feq.cdf(lo)) > TAIL_MASS:
                hi *= 2.0
        else:
            hi = w_max
        return cls.log_spaced(lo, hi, n)

    @property
    def n(self):
        return len(self.edges) - 1

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self):
        return np.diff(self.edges)

    def refine(self):
        """Split every cell into two (geometric midpoints on log grids)."""
        e = self.edges
        mid = np.sqrt(e[1:] * e[:-1]) if e[0] > 0 else 0.5 * (e[1:] + e[:-1])
        out = np.empty(2 * len(e) - 1)
        out[0::2] = e
        out[1::2] = mid
        return Grid(out, self.variable)

    def coarsen(self, factor):
        """Merge every ``factor`` consecutive cells (``n`` must be divisible)."""
        if self.n % factor:
            raise ParameterError(f"{self.n} cells cannot be merged in groups of {factor}")
        return Grid(self.edges[::factor], self.variable)

    def transformed(self, delta):
        """The matching grid in ``y = (2/delta) x^(-delta/2)`` (reversed order)."""
        return Grid(np.sort(to_transformed(self.edges, delta)), "y")

    def bin(self, samples):
        """Histogram density of ``samples`` on this grid (unit total mass).

        Samples outside the grid are counted in the end cells so that mass
        stays one; their number is returned as well.
        """
        samples = np.asarray(samples, dtype=float)
        idx = np.searchsorted(self.edges, samples, side="right") - 1
        outside = int(np.sum((idx < 0) | (idx >= self.n)))
        idx = np.clip(idx, 0, self.n - 1)
        counts = np.bincount(idx, minlength=self.n)
        return counts / (len(samples) * self.widths), outside


@dataclass
class GridDensity:
    values: np.ndarray
    grid: Grid
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ParameterError("density values do not match the grid")

    @classmethod
    def from_function(cls, func, grid, time=0.0, normalize=True):
        vals = np.asarray(func(grid.centers), dtype=float)
        if normalize:
            vals = vals / (vals @ grid.widths)
        return cls(vals, grid, time)

    @classmethod
    def from_log_function(cls, logfunc, grid, time=0.0):
        """Sample ``exp(logfunc)`` and normalise without underflow trouble."""
        lv = np.asarray(logfunc(grid.centers), dtype=float)
        vals = np.exp(lv - lv.max())
        vals /= vals @ grid.widths
        return cls(vals, grid, time)

    def mass(self):
        return float(self.values @ self.grid.widths)

    def moment(self, alpha):
        c = self.grid.centers
        return float((self.values * c ** alpha) @ self.grid.widths)

    def copy(self):
        return GridDensity(self.values.copy(), self.grid, self.time)

    def coarsen(self, factor):
        """Cell averages on ``grid.coarsen(factor)``; masses are preserved."""
        coarse = self.grid.coarsen(factor)
        masses = (self.values * self.grid.widths).reshape(-1, factor).sum(1)
        return GridDensity(masses / coarse.widths, coarse, self.time)

    def to_csv(self, path, header_lines=()):
        col = "w" if self.grid.variable == "w" else self.grid.variable
        name = "f" if col == "w" else "g"
        diagnostics.write_csv(path, [col, name],
                              zip(self.grid.centers, self.values),
                              header_lines)


def discrete_equilibrium(p, grid):
    """Sampled equilibrium on ``grid`` normalised to unit discrete mass."""
    return GridDensity.from_log_function(
        InverseGammaDelta.from_params(p).logpdf, grid)


@dataclass
class SolverConfig:
    dt: float = 1e-3
    theta: float = 1.0
    max_time: float = 10.0
    snapshot_times: tuple = ()
    steady_tol: float = 1e-10
    check_interval: float = 0.1

    def __post_init__(self):
        check_scalar(self.dt, "dt", low=0, include_low=False)
        check_scalar(self.theta, "theta", low=0.5, high=1.0)
        check_scalar(self.max_time, "max_time", low=0)
        check_scalar(self.steady_tol, "steady_tol", low=0, include_low=False)
        self.snapshot_times = tuple(float(t) for t in self.snapshot_times)


# ---------------------------------------------------------------------------
# The ratio-form operator
# ---------------------------------------------------------------------------

class RatioFormOperator:
    """Tridiagonal operator ``L`` with ``(L f)_i = (F_{i+1/2} - F_{i-1/2}) / h_i``.

    Built from the log-equilibrium at centres and the log face weight
    ``log A`` at interior faces; ratios of equilibrium values are formed in
    log space so cells where the equilibrium underflows stay finite.
    """

    def __init__(self, grid, log_q, log_a_faces):
        self.grid = grid
        c, h = grid.centers, grid.widths
        dc = np.diff(c)
        log_q = np.asarray(log_q, dtype=float)
        la = np.asarray(log_a_faces, dtype=float)
        # face coefficient divided by the equilibrium value on either side
        with np.errstate(over="ignore", under="ignore"):
            s_right = np.exp(la - log_q[:-1]) / dc   # multiplies f_i
            s_left = np.exp(la - log_q[1:]) / dc     # multiplies f_{i+1}
        if not (np.all(np.isfinite(s_right)) and np.all(np.isfinite(s_left))):
            raise InvariantViolation("operator coefficients overflow; "
                                     "shrink the grid")
        n = grid.n
        self.lower = np.zeros(n)   # L[i, i-1]
        self.upper = np.zeros(n)   # L[i, i+1]
        self.diag = np.zeros(n)
        self.upper[:-1] = s_left / h[:-1]
        self.lower[1:] = s_right / h[1:]
        self.diag[:-1] -= s_right / h[:-1]
        self.diag[1:] -= s_left / h[1:]
        self._s_right, self._s_left = s_right, s_left

    def apply(self, f):
        out = self.diag * f
        out[:-1] += self.upper[:-1] * f[1:]
        out[1:] += self.lower[1:] * f[:-1]
        return out

    def face_fluxes(self, f):
        """Fluxes at all ``n + 1`` faces; the end faces are zero by construction."""
        flux = np.zeros(self.grid.n + 1)
        flux[1:-1] = self._s_left * f[1:] - self._s_right * f[:-1]
        return flux

    def banded(self, scale):
        """Banded storage of ``I - scale * L`` for ``solve_banded``."""
        ab = np.zeros((3, self.grid.n))
        ab[0, 1:] = -scale * self.upper[:-1]
        ab[1] = 1.0 - scale * self.diag
        ab[2, :-1] = -scale * self.lower[1:]
        return ab

    def theta_step(self, f, dt, theta=1.0):
        rhs = f if theta == 1.0 else f + (1.0 - theta) * dt * self.apply(f)
        return linalg.solve_banded((1, 1), self.banded(theta * dt), rhs,
                                   check_finite=False)


def _check_positive(values, where):
    bad = np.flatnonzero(values < 0)
    if len(bad):
        i = int(bad[0])
        raise NegativeDensityError(
            f"{where}: negative value {values[i]:.3e} in cell {i}; reduce dt "
            "or use theta = 1", cell=i)


def _theta_bound(op):
    """Largest dt for which the explicit part of a theta < 1 step is monotone."""
    return 1.0 / np.max(-op.diag)


class _Stepper:
    grid = None
    op = None
    time_scale = 1.0

    def step(self, u, cfg):
        f = np.asarray(u.values, dtype=float)
        mass0 = f @ self.grid.widths
        dt = cfg.dt * self.time_scale
        if cfg.theta < 1.0 and (1.0 - cfg.theta) * dt > _theta_bound(self.op):
            raise InvariantViolation(
                f"dt = {cfg.dt} exceeds the positivity bound of the "
                f"theta = {cfg.theta} scheme")
        new = self.op.theta_step(f, dt, cfg.theta)
        _check_positive(new, type(self).__name__)
        flux = self.op.face_fluxes(new)
        if flux[0] != 0.0 or flux[-1] != 0.0:
            raise InvariantViolation("nonzero flux through an end face")
        if mass0 > 0 and abs(new @ self.grid.widths - mass0) > 1e-12 * mass0:
            raise InvariantViolation("mass not conserved by the step")
        return GridDensity(new, self.grid, u.time + cfg.dt)


class LinearFokkerPlanck(_Stepper):
    """``f_t = c [(w^(2+d) f)_ww + mu (w^d (w - m) f)_w]`` on a log grid.

    ``c`` is ``time_scale`` (1 by default); the grazing limit of the kinetic
    model has ``c = kappa sigma M_delta / 2``.
    """

    def __init__(self, p, grid, time_scale=1.0):
        if not p.reference_mode:
            p.require_mu_above_one()
        self.p, self.grid = p, grid
        self.time_scale = check_scalar(time_scale, "time_scale", low=0,
                                       include_low=False)
        self.equilibrium_density = InverseGammaDelta.from_params(p)
        self.op = self._build(p.m)

    def _build(self, m):
        p, g = self.p, self.grid
        d, mu = p.delta, p.mu
        # unnormalised log equilibrium; normalising constants cancel in A / q
        def logq(w):
            return -mu * m / w - (2.0 + d + mu) * np.log(w)
        wf = g.edges[1:-1]
        return RatioFormOperator(g, logq(g.centers),
                                 (2.0 + d) * np.log(wf) + logq(wf))

    def equilibrium(self):
        return discrete_equilibrium(self.p, self.grid)


class TransformedFokkerPlanck(_Stepper):
    """``g_t = g_yy + (W'(y) g)_y`` with the generalized Gamma equilibrium."""

    def __init__(self, p, grid):
        if p.delta == 0:
            raise ParameterError("the transformed solver needs delta > 0")
        if grid.edges[0] <= 0:
            raise ParameterError("y-grid must lie in (0, inf)")
        p.require_mu_above_one()
        self.p, self.grid = p, grid
        self.equilibrium_density = GeneralizedGamma(*ggamma_params(p))
        self.potential = Potential.from_params(p)
        logq = lambda y: -self.potential.W(y)
        self.op = RatioFormOperator(grid, logq(grid.centers),
                                    logq(grid.edges[1:-1]))

    def equilibrium(self):
        return GridDensity.from_log_function(
            self.equilibrium_density.logpdf, self.grid)


class NonlinearFokkerPlanck(_Stepper):
    """Moment-dependent equation from binary trading with the kernel.

    Each step freezes ``m_delta`` from the grid quadrature (diffusion scale
    ``kappa sigma m_delta / 2``) and picks the effective mean ``m_eff`` so
    the discrete first moment is conserved exactly; the root is searched
    next to the quadrature value ``m_{1+delta} / m_delta``.
    """

    def __init__(self, p, grid):
        self.p, self.grid = p, grid
        self._lin = {}
        self.last_m_eff = None
        self.last_time_scale = None

    def _operator(self, m_eff):
        lin = LinearFokkerPlanck.__new__(LinearFokkerPlanck)
        lin.p, lin.grid = self.p.with_(m=m_eff), self.grid
        return lin._build(m_eff)

    def frozen_moments(self, f):
        c, h = self.grid.centers, self.grid.widths
        d = self.p.delta
        mass = f @ h
        m_d = (f * c ** d) @ h / mass
        m_1d = (f * c ** (1.0 + d)) @ h / mass
        return m_d, m_1d

    def step(self, u, cfg):
        p, g = self.p, self.grid
        f = np.asarray(u.values, dtype=float)
        c, h = g.centers, g.widths
        m_d, m_1d = self.frozen_moments(f)
        if m_d < 1e-14:
            raise InvariantViolation(f"m_delta = {m_d} is degenerate")
        time_scale = p.kappa_kernel * p.sigma * m_d / 2.0
        dt = cfg.dt * time_scale
        mean0 = (f * c) @ h
        m_quad = m_1d / m_d

        def mean_error(m_eff):
            new = self._operator(m_eff).theta_step(f, dt, cfg.theta)
            return ((new * c) @ h - mean0) / mean0

        lo, hi = m_quad * (1 - 1e-3), m_quad * (1 + 1e-3)
        flo, fhi = mean_error(lo), mean_error(hi)
        for _ in range(60):
            if flo * fhi <= 0:
                break
            lo, hi = lo * 0.9, hi * 1.1
            flo, fhi = mean_error(lo), mean_error(hi)
        else:
            raise ConvergenceError("could not bracket the mean-conserving m_eff")
        m_eff = optimize.brentq(mean_error, lo, hi, xtol=1e-15 * m_quad,
                                rtol=4 * np.finfo(float).eps)
        self.op = self._operator(m_eff)
        self.time_scale = time_scale
        self.last_m_eff, self.last_time_scale = m_eff, time_scale
        return _Stepper.step(self, u, cfg)

    def self_consistent_equilibrium(self, mean=None):
        """Stationary state carrying the discrete first moment ``mean``.

        Every inverse Gamma ``f_inf`` satisfies ``m_{1+d}/m_d = m`` for its own
        ``m``, so the stationary states form a one-parameter family indexed
        by the conserved mean.  The member is picked by matching the discrete
        mean on the grid; returns ``(density, m)``.
        """
        p = self.p
        if mean is None:
            mean = p.m * p.mu / (p.mu + p.delta)

        def gap(m):
            q = discrete_equilibrium(p.with_(m=m), self.grid)
            return q.moment(1.0) / q.mass() - mean
        m0 = mean * (p.mu + p.delta) / p.mu
        m_star = optimize.brentq(gap, 0.8 * m0, 1.25 * m0, xtol=1e-15 * m0)
        return discrete_equilibrium(p.with_(m=m_star), self.grid), m_star


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------

def step_linear_fp(u, p, cfg):
    return LinearFokkerPlanck(p, u.grid).step(u, cfg)


def step_nonlinear_fp(u, p, cfg):
    return NonlinearFokkerPlanck(p, u.grid).step(u, cfg)


def step_transformed_fp(g, p, cfg):
    return TransformedFokkerPlanck(p, g.grid).step(g, cfg)


def make_stepper(kind, p, grid):
    kinds = {"linear": LinearFokkerPlanck, "nonlinear": NonlinearFokkerPlanck,
             "transformed": TransformedFokkerPlanck}
    try:
        return kinds[kind](p, grid)
    except KeyError:
        raise ParameterError(f"unknown solver kind {kind!r}") from None


def _reference(stepper, u):
    if isinstance(stepper, NonlinearFokkerPlanck):
        return stepper.self_consistent_equilibrium(u.moment(1.0) / u.mass())[0]
    return stepper.equilibrium()


def series_row(u, ref, delta, coordinate="x"):
    h = u.grid.widths
    H = diagnostics.relative_entropy(u, ref)
    l1 = float(np.abs(u.values - ref.values) @ h)
    diagnostics.check_csiszar_kullback(H, l1)
    if coordinate == "x":
        I = diagnostics.fisher_weighted(u, ref, delta)
    else:
        I = diagnostics.fisher_weighted(u, ref, 0.0, weight_power=0.0)
    return dict(t=u.time, mass=u.mass(), mean=u.moment(1.0),
                m2=u.moment(2.0), H=H, I_delta=I, l1_to_eq=l1)


def evolve(u0, p, cfg, kind="linear", t_end=None, record_every=None,
           stepper=None):
    """Integrate to ``t_end`` recording a :class:`DecaySeries`.

    Rows are written at ``cfg.snapshot_times`` and every ``record_every``
    time units when given.  Returns ``(final, series, snapshots)``.
    """
    stepper = stepper or make_stepper(kind, p, u0.grid)
    ref = _reference(stepper, u0)
    coord = "y" if isinstance(stepper, TransformedFokkerPlanck) else "x"
    t_end = cfg.max_time if t_end is None else t_end
    nsteps = int(round(t_end / cfg.dt))
    record = set()
    if record_every:
        k = max(1, int(round(record_every / cfg.dt)))
        record.update(range(0, nsteps + 1, k))
    snaps = {int(round(t / cfg.dt)): t for t in cfg.snapshot_times
             if t <= t_end + 1e-12}
    record.update(snaps)
    record.update({0, nsteps})
    series = diagnostics.DecaySeries()
    snapshots = {}
    u = u0.copy()
    for n in range(nsteps + 1):
        if n > 0:
            u = stepper.step(u, cfg)
            u.time = n * cfg.dt
        if n in record:
            series.append(**series_row(u, ref, p.delta, coord))
        if n in snaps:
            snapshots[snaps[n]] = u.copy()
    return u, series, snapshots


def solve_to_steady(u0, p, cfg, kind="linear"):
    """Step until ``||u(t + D) - u(t)||_1 < steady_tol * D`` with ``D = check_interval``.

    Raises :class:`ConvergenceError` if ``max_time`` is reached first.
    """
    stepper = make_stepper(kind, p, u0.grid)
    ref = _reference(stepper, u0)
    coord = "y" if isinstance(stepper, TransformedFokkerPlanck) else "x"
    h = u0.grid.widths
    k = max(1, int(round(cfg.check_interval / cfg.dt)))
    interval = k * cfg.dt
    nmax = int(round(cfg.max_time / cfg.dt))
    series = diagnostics.DecaySeries()
    u = u0.copy()
    series.append(**series_row(u, ref, p.delta, coord))
    last = u.values.copy()
    residual = math.inf
    n = 0
    # one trial step detects data that is already stationary
    trial = stepper.step(u, cfg)
    if float(np.abs(trial.values - u.values) @ h) < cfg.steady_tol * cfg.dt:
        return u, series
    while n < nmax:
        u = stepper.step(u, cfg)
        n += 1
        u.time = n * cfg.dt
        if n % k == 0:
            series.append(**series_row(u, ref, p.delta, coord))
            residual = float(np.abs(u.values - last) @ h)
            if residual < cfg.steady_tol * interval:
                return u, series
            last = u.values.copy()
    raise ConvergenceError(
        f"no steady state within max_time={cfg.max_time}; last residual "
        f"{residual:.3e}", residual=residual)


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------

class FokkerPlanckSolver(TransformerMixin, BaseEstimator):
    """Estimator-style front end to the finite-volume solvers.

    ``fit`` builds the grid and the discrete equilibrium; ``transform`` maps
    a 2-d array of initial cell densities (one density per row) to the
    densities at ``t_end``.

    Parameters
    ----------
    mu, m, delta : float
        Drift ratio, market mean and kernel exponent.
    kind : {"linear", "nonlinear", "transformed"}
    n_cells : int
    dt, theta, t_end : float
        Time step, implicitness and final time.
    kappa_kernel, lam : float
        Only used by the nonlinear solver (diffusion scale).
    """

    def __init__(self, mu=2.0, m=1.0, delta=1.0, kind="linear", n_cells=512,
                 w_min=None, w_max=None, dt=1e-3, theta=1.0, t_end=1.0,
                 kappa_kernel=1.0, lam=0.5):
        self.mu = mu
        self.m = m
        self.delta = delta
        self.kind = kind
        self.n_cells = n_cells
        self.w_min = w_min
        self.w_max = w_max
        self.dt = dt
        self.theta = theta
        self.t_end = t_end
        self.kappa_kernel = kappa_kernel
        self.lam = lam

    def _params(self):
        return ModelParams.from_mu(self.mu, self.m, self.delta, lam=self.lam,
                                   kappa_kernel=self.kappa_kernel)

    def fit(self, X=None, y=None):
        p = self._params()
        grid = Grid.for_params(p, self.n_cells, self.w_min, self.w_max)
        if self.kind == "transformed":
            grid = grid.transformed(p.delta)
        self.params_ = p
        self.grid_ = grid
        self.stepper_ = make_stepper(self.kind, p, grid)
        if isinstance(self.stepper_, NonlinearFokkerPlanck):
            self.equilibrium_ = self.stepper_.self_consistent_equilibrium()[0]
        else:
            self.equilibrium_ = self.stepper_.equilibrium()
        self.n_features_in_ = grid.n
        return self

    def _config(self):
        return SolverConfig(dt=self.dt, theta=self.theta, max_time=self.t_end)

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_density_values(X, self.grid_.widths, allow_2d=True)
        X = np.atleast_2d(X)
        out = np.empty_like(X)
        cfg = self._config()
        for i, row in enumerate(X):
            final, _, _ = evolve(GridDensity(row, self.grid_), self.params_,
                                 cfg, stepper=self.stepper_)
            out[i] = final.values
        return out

    def evolve(self, u0, record_every=None):
        """Return ``(final GridDensity, DecaySeries)`` for one initial density."""
        check_is_fitted(self, "grid_")
        if not isinstance(u0, GridDensity):
            u0 = GridDensity(check_density_values(u0, self.grid_.widths),
                             self.grid_)
        final, series, _ = evolve(u0, self.params_, self._config(),
                                  record_every=record_every,
                                  stepper=self.stepper_)
        return final, series
