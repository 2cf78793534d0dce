"""Experiment orchestration: configuration, seeding, execution and reports.

A run reads a JSON configuration, executes one mode, and writes CSV/JSON
outputs plus ``manifest.json`` into an output directory.  Every output file
starts with a header carrying the configuration hash and the seed.
"""

import datetime as _dt
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats

from . import analytic, diagnostics, fokker_planck as fp, kinetic
from .analytic import ModelParams
from .exceptions import ConfigError, ParameterError

MODES = ("steady", "fp-linear", "fp-nonlinear", "fp-transformed",
         "mc-linear", "mc-gambling", "mc-binary", "grazing-study", "lsi-audit")

MASK64 = (1 << 64) - 1


def mix_seed(seed, index):
    """64-bit replica seed from ``(seed, index)``.

    SplitMix64 finaliser applied to ``seed + (index + 1) * 0x9E3779B97F4A7C15``
    (all arithmetic modulo 2**64)::

        z = (seed + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
        z = z ^ (z >> 31)
    """
    if not (0 <= seed <= MASK64 and index >= 0):
        raise ConfigError("seed must be a 64-bit unsigned integer")
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def code_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "econokin experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": MASK64},
        "replicas": {"type": "integer", "minimum": 1},
        "params": {
            "type": "object", "additionalProperties": False,
            "properties": {"mu": _pos, "lam": _pos, "sigma": _pos, "m": _pos,
                           "delta": {"type": "number", "minimum": 0,
                                     "maximum": 1},
                           "kappa_kernel": _pos},
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_cells": {"type": "integer", "minimum": 2},
                           "w_min": _pos, "w_max": _pos},
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {"dt": _pos, "theta": {"type": "number",
                                                  "minimum": 0.5,
                                                  "maximum": 1},
                           "t_end": _pos, "record_every": _pos,
                           "snapshot_times": {"type": "array", "items": _num}},
        },
        "initial": {
            "type": "object",
            "required": ["family"],
            "properties": {"family": {"enum": ["gamma", "inverse_gamma",
                                               "uniform", "exponential",
                                               "lognormal"]}},
        },
        "rule": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lam": _pos,
                "eta": {"type": "object", "required": ["type"],
                        "properties": {"type": {"enum": ["two_point",
                                                         "truncated_gaussian"]},
                                       "r": _pos, "sigma": _pos,
                                       "bound": _pos}},
                "market": {"type": "object", "additionalProperties": False,
                           "properties": {"shape": _pos, "mean": _pos,
                                          "target_m": _pos}},
                "variant": {"enum": ["conservative", "mean_conservative"]},
                "omega_b": _pos,
                "a": {"type": "number", "exclusiveMinimum": 1},
            },
        },
        "mc": {
            "type": "object", "additionalProperties": False,
            "properties": {"n": {"type": "integer", "minimum": 2},
                           "t_end": _pos, "dt": _pos, "safety": _pos,
                           "record_every": _pos,
                           "n_chunks": {"type": "integer", "minimum": 1},
                           "normalize_mean": {"type": "boolean"}},
        },
        "grazing": {
            "type": "object", "additionalProperties": False,
            "properties": {"epsilons": {"type": "array", "items": _pos,
                                        "minItems": 1},
                           "t_end": _pos, "n": {"type": "integer",
                                                 "minimum": 2},
                           "coarsen": {"type": "integer", "minimum": 1},
                           "fp_dt": _pos},
        },
        "lsi": {
            "type": "object", "additionalProperties": False,
            "properties": {"deltas": {"type": "array", "items": _pos,
                                      "minItems": 1},
                           "trials": {"type": "integer", "minimum": 1}},
        },
    },
}


def config_hash(doc):
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class ExperimentConfig:
    mode: str
    doc: dict
    seed: int = 0
    replicas: int = 1
    hash: str = ""

    @classmethod
    def from_dict(cls, doc, mode=None, seed=None, replicas=None):
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from None
        doc = json.loads(json.dumps(doc))
        if mode is not None:
            if "mode" in doc and doc["mode"] != mode:
                raise ConfigError(
                    f"config mode {doc['mode']!r} conflicts with {mode!r}")
            doc["mode"] = mode
        if "mode" not in doc:
            raise ConfigError("no mode given")
        if seed is not None:
            doc["seed"] = int(seed)
        if replicas is not None:
            doc["replicas"] = int(replicas)
        mix_seed(doc.get("seed", 0), 0)
        cfg = cls(mode=doc["mode"], doc=doc, seed=int(doc.get("seed", 0)),
                  replicas=int(doc.get("replicas", 1)), hash=config_hash(doc))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, **kw):
        text = Path(path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, **kw)

    def section(self, name):
        return dict(self.doc.get(name, {}))

    # -- derived objects ---------------------------------------------------

    def params(self):
        s = self.section("params")
        delta = s.get("delta", 1.0)
        kappa = s.get("kappa_kernel", 1.0)
        m = s.get("m", 1.0)
        try:
            if "mu" in s:
                if "sigma" in s:
                    raise ConfigError("give either mu or sigma, not both")
                return ModelParams.from_mu(s["mu"], m, delta,
                                           lam=s.get("lam", 0.5),
                                           kappa_kernel=kappa)
            rule = self.doc.get("rule", {})
            lam = s.get("lam", rule.get("lam", 0.5))
            sigma = s.get("sigma")
            if sigma is None and "eta" in rule:
                sigma = self._eta().variance
            if sigma is None:
                # neither mu nor sigma given: the reference case mu = 2
                return ModelParams.from_mu(2.0, m, delta, lam=lam,
                                           kappa_kernel=kappa)
            return ModelParams(lam=lam, sigma=sigma, m=m, delta=delta,
                               kappa_kernel=kappa)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def _eta(self):
        e = self.section("rule").get("eta", {"type": "two_point", "r": 0.05})
        if e["type"] == "two_point":
            return kinetic.TwoPoint(e.get("r", 0.05))
        return kinetic.TruncatedGaussianLike(e["sigma"], e["bound"])

    def market(self, delta):
        mk = self.section("rule").get("market", {})
        shape = mk.get("shape", 4.0)
        if "target_m" in mk:
            return kinetic.MarketSpec.gamma_for_target(shape, mk["target_m"], delta)
        return kinetic.MarketSpec.gamma(shape, mk.get("mean", 1.0))

    def rule(self):
        r = self.section("rule")
        delta = self.section("params").get("delta", 1.0)
        try:
            if self.mode in ("mc-linear", "grazing-study"):
                return kinetic.LinearMarket(r.get("lam", 0.1), self._eta(),
                                            self.market(delta))
            if self.mode == "mc-binary":
                return kinetic.BinaryCPT(r.get("lam", 0.1), self._eta())
            if self.mode == "mc-gambling":
                if r.get("variant", "conservative") == "conservative":
                    return kinetic.GamblingConservative(
                        kinetic.SymmetricOmega(r.get("omega_b", 1.0)))
                return kinetic.GamblingMeanConservative(r.get("a", 3.0))
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        raise ConfigError(f"mode {self.mode} has no interaction rule")

    def mc_params(self):
        """Kernel constants for the MC modes; trade constants come from the rule."""
        s = self.section("params")
        rule = self.rule()
        delta = s.get("delta", 1.0)
        kappa = s.get("kappa_kernel", 1.0)
        if isinstance(rule, (kinetic.LinearMarket, kinetic.BinaryCPT)):
            m = rule.market.target_mean(delta) if isinstance(
                rule, kinetic.LinearMarket) else s.get("m", 1.0)
            return ModelParams(lam=rule.lam, sigma=rule.eta.variance, m=m,
                               delta=delta, kappa_kernel=kappa)
        return ModelParams(lam=0.5, sigma=1.0, delta=delta, kappa_kernel=kappa)

    def initial_dist(self):
        s = self.section("initial") or {"family": "gamma", "shape": 8.0,
                                        "mean": 1.0}
        fam = s["family"]
        try:
            if fam == "gamma":
                k = s.get("shape", 8.0)
                return stats.gamma(k, scale=s.get("mean", 1.0) / k)
            if fam == "inverse_gamma":
                return stats.invgamma(s.get("shape", 4.0),
                                      scale=s.get("scale", 3.0))
            if fam == "uniform":
                lo, hi = s.get("low", 0.5), s.get("high", 1.5)
                return stats.uniform(lo, hi - lo)
            if fam == "exponential":
                return stats.expon(scale=s.get("mean", 1.0))
            return stats.lognorm(s.get("sd_log", 0.5),
                                 scale=math.exp(s.get("mean_log", 0.0)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"initial: {exc}") from None

    def validate(self):
        mode = self.mode
        if mode.startswith("fp-") or mode == "steady":
            p = self.params()
            if p.delta > 0 and not p.mu > 1:
                raise ConfigError(f"mu = {p.mu} must exceed 1")
            if mode == "fp-transformed" and p.delta == 0:
                raise ConfigError("fp-transformed needs delta > 0")
        if mode in ("mc-linear", "mc-binary", "mc-gambling", "grazing-study"):
            rule = self.rule()
            if mode == "mc-linear" and not self.mc_params().second_moment_bounded():
                raise ConfigError("mc-linear needs sigma + lam^2 < 2 lam")
            if mode == "grazing-study":
                for eps in self.section("grazing").get("epsilons",
                                                       [0.2, 0.1, 0.05]):
                    try:
                        kinetic.check_grazing_scaling(rule, eps)
                    except ParameterError as exc:
                        raise ConfigError(str(exc)) from None
        if mode == "lsi-audit":
            for d in self.section("lsi").get("deltas", [0.25, 0.5, 0.75, 1.0]):
                if not 0 < d <= 1:
                    raise ConfigError("lsi deltas must lie in (0, 1]")
        if "initial" in self.doc and mode.startswith("fp-"):
            u0 = self.initial_density(self.params())
            report = analytic.validate_initial_condition(u0, self.params())
            if not report.passed:
                raise ConfigError("initial condition fails: " + ", ".join(
                    report.failed()))

    def grid(self, p):
        g = self.section("grid")
        return fp.Grid.for_params(p, g.get("n_cells", 512), g.get("w_min"),
                                  g.get("w_max"))

    def initial_density(self, p, grid=None):
        grid = grid or self.grid(p)
        dist = self.initial_dist()
        return fp.GridDensity.from_log_function(dist.logpdf, grid)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

class Writer:
    """Single collector for all files of a run."""

    def __init__(self, out_dir, cfg):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.files = []

    def header(self, seed=None):
        return [f"econokin {code_version()}", f"mode={self.cfg.mode}",
                f"config_hash={self.cfg.hash}",
                f"seed={self.cfg.seed if seed is None else seed}"]

    def _path(self, name):
        self.files.append(name)
        return self.out / name

    def csv(self, name, columns, rows, seed=None):
        diagnostics.write_csv(self._path(name), columns, rows,
                              self.header(seed))

    def series(self, name, series, seed=None):
        series.to_csv(self._path(name), self.header(seed))

    def density(self, name, density, seed=None):
        density.to_csv(self._path(name), self.header(seed))

    def json(self, name, doc, seed=None):
        body = {"_header": {"generator": f"econokin {code_version()}",
                            "mode": self.cfg.mode,
                            "config_hash": self.cfg.hash,
                            "seed": self.cfg.seed if seed is None else seed}}
        body.update(doc)
        self._path(name).write_text(json.dumps(body, indent=2,
                                               default=_json_default) + "\n",
                                    encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite_or_none(x):
    return float(x) if x is not None and np.isfinite(x) else None


def _resolve_workers(workers):
    if workers is None:
        env = os.environ.get("ECONOKIN_WORKERS")
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError("ECONOKIN_WORKERS must be an integer") from None
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return workers


def _map(func, tasks, workers):
    """Ordered map; runs inline for one worker or a single task."""
    if workers == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(func, tasks))


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def _mode_steady(cfg, writer, workers):
    p = cfg.params()
    grid = cfg.grid(p)
    feq = analytic.InverseGammaDelta.from_params(p)
    writer.csv("f_inf.csv", ["w", "f"], zip(grid.centers, feq.pdf(grid.centers)))
    summary = {"mu": p.mu, "m": p.m, "delta": p.delta,
               "inverse_gamma_shape": feq.shape, "inverse_gamma_scale": feq.scale,
               "tail_exponent": feq.tail_exponent,
               "mean": _finite_or_none(feq.mean()),
               "variance": _finite_or_none(feq.var())}
    if p.delta > 0:
        gg = analytic.GeneralizedGamma.from_params(p)
        ygrid = grid.transformed(p.delta)
        writer.csv("g_inf.csv", ["y", "g"],
                   zip(ygrid.centers, gg.pdf(ygrid.centers)))
        summary.update(rho_delta=analytic.rho_delta(p),
                       ggamma={"kappa_shape": gg.kappa_shape,
                               "theta": gg.theta, "nu": gg.nu})
    else:
        summary["rho_delta"] = None
    return summary


def _transformed_initial(cfg, p, ygrid):
    dist = cfg.initial_dist()
    d = p.delta

    def logg(y):
        x = analytic.from_transformed(y, d)
        return dist.logpdf(x) + (1.0 + d / 2.0) * np.log(x)
    return fp.GridDensity.from_log_function(logg, ygrid)


def _mode_fp(cfg, writer, workers):
    p = cfg.params()
    kind = cfg.mode[3:]
    s = cfg.section("solver")
    t_end = s.get("t_end", 5.0)
    scfg = fp.SolverConfig(dt=s.get("dt", 1e-3), theta=s.get("theta", 1.0),
                           max_time=t_end,
                           snapshot_times=s.get("snapshot_times", ()))
    grid = cfg.grid(p)
    if kind == "transformed":
        grid = grid.transformed(p.delta)
        u0 = _transformed_initial(cfg, p, grid)
    else:
        u0 = cfg.initial_density(p, grid)
    final, series, snaps = fp.evolve(u0, p, scfg, kind=kind, t_end=t_end,
                                     record_every=s.get("record_every", 0.05))
    writer.series("series.csv", series)
    writer.density("density_final.csv", final)
    for t, snap in sorted(snaps.items()):
        writer.density(f"density_t={diagnostics.format_float(t)}.csv", snap)
    stepper = fp.make_stepper(kind, p, grid)
    ref = fp._reference(stepper, u0)
    rho = analytic.rho_delta(p) if p.delta > 0 else None
    rep = diagnostics.entropy_report(final, ref, p.delta, rho)
    writer.json("entropy_report.json", json.loads(rep.to_json()))
    return _fp_summary(series, p, kind)


def _fp_summary(series, p, kind):
    H, t = series["H"], series["t"]
    out = {"mass_drift": float(np.max(np.abs(series["mass"] - series["mass"][0]))),
           "mean_drift": float(np.max(np.abs(series["mean"] - series["mean"][0]))),
           "H_initial": float(H[0]), "H_final": float(H[-1])}
    try:
        out["fitted_H_rate"] = diagnostics.fit_decay_rate(series).rate
    except ParameterError:
        out["fitted_H_rate"] = None
    if p.delta > 0 and kind in ("linear", "transformed"):
        rho = analytic.rho_delta(p)
        out["two_rho_delta"] = 2 * rho
        out["bound_satisfied"] = bool(np.all(
            H <= H[0] * np.exp(-2 * rho * t) * (1 + 1e-9) + 1e-15))
    else:
        out["two_rho_delta"] = None
        out["bound_satisfied"] = None
    return out


def _mc_reference(rule, p):
    if isinstance(rule, kinetic.GamblingConservative) and rule.omega.b == 1.0 \
            and p.delta < 1:
        return analytic.GammaGambling(p.delta)
    if isinstance(rule, kinetic.GamblingMeanConservative) \
            and rule.a + p.delta > 1:
        return analytic.InverseGammaGambling(rule.a, p.delta)
    return None


def _mc_task(task):
    cfg = ExperimentConfig.from_dict(task["doc"])
    rule, p = cfg.rule(), cfg.mc_params()
    mc = cfg.section("mc")
    e = kinetic.ParticleEnsemble.sample(cfg.initial_dist(), mc.get("n", 10000),
                                        seed=task["seed"])
    if mc.get("normalize_mean", False):
        e.wealths /= e.wealths.mean()
    m1_0, m2_0 = e.moment(1.0), e.moment(2.0)
    history = kinetic.run(e, rule, p, mc.get("t_end", 10.0), dt=mc.get("dt"),
                          safety=mc.get("safety", 0.5),
                          record_every=mc.get("record_every", 1.0),
                          n_chunks=mc.get("n_chunks", 1))
    ms = kinetic.moment_series(history, (1.0, 2.0))
    m1, se1 = ms.m(1.0)
    m2, se2 = ms.m(2.0)
    grid = fp.Grid.log_spaced(1e-4 * m1_0, 1e2 * m1_0, 120)
    hist, outside = grid.bin(e.wealths)
    out = {"seed": task["seed"], "index": task["index"],
           "moments": np.column_stack([ms.times, m1, se1, m2, se2]),
           "hist": np.column_stack([grid.centers, hist]),
           "outside": outside, "stats": dict(e.stats),
           "final_mean": e.moment(1.0), "mean_se": kinetic.mean_standard_error(e),
           "normalized_var": float(np.var(e.wealths / e.wealths.mean())),
           "m1_0": m1_0}
    if isinstance(rule, kinetic.LinearMarket):
        mb = kinetic.mean_bound(m1_0, rule.market, p.delta)
        m2b = max(m2_0, kinetic.second_moment_bar(rule, p.delta))
        out["mean_bound"] = mb
        out["mean_bound_excess_se"] = float(np.max((m1 - mb) / se1))
        out["m2_bound"] = m2b
        out["m2_bound_excess_se"] = float(np.max((m2 - m2b) / se2))
    ref = _mc_reference(rule, p)
    if ref is not None:
        out["reference_var"] = float(ref.var())
        edges = grid.edges
        ref_mass = np.diff(ref.cdf(edges)) if hasattr(ref, "cdf") else \
            ref.pdf(grid.centers) * grid.widths
        out["hist_l1"] = float(np.abs(hist * grid.widths - ref_mass).sum())
    return out


def _mode_mc(cfg, writer, workers):
    tasks = [{"doc": cfg.doc, "seed": mix_seed(cfg.seed, i), "index": i}
             for i in range(cfg.replicas)]
    results = _map(_mc_task, tasks, workers)
    reps = []
    for r in results:
        i, seed = r["index"], r["seed"]
        writer.csv(f"moments_r{i}.csv", ["t", "m1", "m1_se", "m2", "m2_se"],
                   r["moments"], seed=seed)
        writer.csv(f"histogram_r{i}.csv", ["w", "f"], r["hist"], seed=seed)
        reps.append({k: v for k, v in r.items() if k not in ("moments", "hist")})
    summary = {"replicas": reps}
    if "mean_bound" in reps[0]:
        summary["mean_bound_satisfied"] = all(
            r["mean_bound_excess_se"] <= 3 for r in reps)
        summary["m2_bound_satisfied"] = all(
            r["m2_bound_excess_se"] <= 3 for r in reps)
    if isinstance(cfg.rule(), (kinetic.BinaryCPT,
                               kinetic.GamblingMeanConservative)):
        summary["mean_conserved_within_3se"] = all(
            abs(r["final_mean"] - r["m1_0"]) <= 3 * r["mean_se"] for r in reps)
    return summary


def _grazing_setup(cfg):
    rule, p = cfg.rule(), cfg.mc_params()
    ref, scale = kinetic.grazing_reference(rule, p)
    g = cfg.section("grazing")
    grid = cfg.grid(ref)
    factor = g.get("coarsen", 8)
    u0 = cfg.initial_density(ref, grid)
    st = fp.LinearFokkerPlanck(ref, grid, time_scale=scale)
    final, _, _ = fp.evolve(u0, ref, fp.SolverConfig(dt=g.get("fp_dt", 1e-3)),
                            t_end=g.get("t_end", 1.0), stepper=st)
    return rule, p, final.coarsen(factor)


def _grazing_task(task):
    cfg = ExperimentConfig.from_dict(task["doc"])
    rule, p = cfg.rule(), cfg.mc_params()
    g = cfg.section("grazing")
    e = kinetic.ParticleEnsemble.sample(cfg.initial_dist(), g.get("n", 20000),
                                        seed=task["seed"])
    kinetic.run_grazing(e, rule, p, task["epsilon"], g.get("t_end", 1.0))
    coarse = fp.Grid(np.asarray(task["edges"]))
    hist = kinetic.histogram_density(e, coarse)
    fpd = fp.GridDensity(np.asarray(task["fp_values"]), coarse)
    return {"epsilon": task["epsilon"], "replica": task["replica"],
            "seed": task["seed"], "l1": diagnostics.l1_distance(hist, fpd),
            "remainder": kinetic.remainder_statistic(e, rule, p, task["epsilon"]),
            "sweeps": e.stats["sweeps"], "mean": e.moment(1.0)}


def _mode_grazing(cfg, writer, workers):
    rule, p, fpd = _grazing_setup(cfg)
    eps_list = cfg.section("grazing").get("epsilons", [0.2, 0.1, 0.05])
    tasks = []
    for j, eps in enumerate(eps_list):
        for r in range(cfg.replicas):
            tasks.append({"doc": cfg.doc, "epsilon": eps, "replica": r,
                          "seed": mix_seed(cfg.seed, j * cfg.replicas + r),
                          "edges": fpd.grid.edges.tolist(),
                          "fp_values": fpd.values.tolist()})
    results = _map(_grazing_task, tasks, workers)
    writer.csv("grazing.csv", ["epsilon", "replica", "l1", "remainder", "sweeps"],
               [(r["epsilon"], r["replica"], r["l1"], r["remainder"], r["sweeps"])
                for r in results])
    table = []
    for eps in eps_list:
        l1 = np.array([r["l1"] for r in results if r["epsilon"] == eps])
        rem = np.array([r["remainder"] for r in results if r["epsilon"] == eps])
        se = float(l1.std(ddof=1) / math.sqrt(len(l1))) if len(l1) > 1 else math.nan
        table.append((eps, float(l1.mean()), se, float(rem.mean())))
    writer.csv("grazing_summary.csv", ["epsilon", "l1_mean", "l1_se",
                                       "remainder_mean"], table)
    writer.density("fp_reference.csv", fpd)
    order = sorted(table, key=lambda row: -row[0])
    mono = all(a[1] > b[1] for a, b in zip(order[:-1], order[1:]))
    return {"l1_by_epsilon": {diagnostics.format_float(e): l for e, l, _, _ in table},
            "monotone_decreasing": mono,
            "seeds": [r["seed"] for r in results]}


def _lsi_task(task):
    cfg = ExperimentConfig.from_dict(task["doc"])
    p = cfg.params().with_(delta=task["delta"])
    res = diagnostics.lsi_audit(p, cfg.section("lsi").get("trials", 100),
                                rng=task["seed"])
    return {"delta": task["delta"], "seed": task["seed"], "H": res.H, "I": res.I,
            "ratios_y": res.ratios_y, "ratios_x": res.ratios_x,
            "summary": res.to_dict()}


def _mode_lsi(cfg, writer, workers):
    deltas = cfg.section("lsi").get("deltas", [0.25, 0.5, 0.75, 1.0])
    tasks = [{"doc": cfg.doc, "delta": d, "seed": mix_seed(cfg.seed, j)}
             for j, d in enumerate(deltas)]
    results = _map(_lsi_task, tasks, workers)
    out = {}
    for r in results:
        rows = zip(range(len(r["H"])), r["H"], r["I"], r["ratios_y"],
                   r["ratios_x"])
        name = f"lsi_delta={diagnostics.format_float(r['delta'])}.csv"
        writer.csv(name, ["trial", "H", "I", "ratio_y", "ratio_x"], rows,
                   seed=r["seed"])
        out[diagnostics.format_float(r["delta"])] = r["summary"]
    worst = max(s["worst_ratio"] for s in out.values())
    return {"by_delta": out, "worst_lsi_ratio": worst,
            "all_satisfied": all(s["all_satisfied"] for s in out.values())}


_DISPATCH = {"steady": _mode_steady, "fp-linear": _mode_fp,
             "fp-nonlinear": _mode_fp, "fp-transformed": _mode_fp,
             "mc-linear": _mode_mc, "mc-gambling": _mode_mc,
             "mc-binary": _mode_mc, "grazing-study": _mode_grazing,
             "lsi-audit": _mode_lsi}


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def run(cfg, out_dir, workers=None):
    """Execute ``cfg`` and write its outputs; returns the manifest dict."""
    workers = _resolve_workers(workers)
    writer = Writer(out_dir, cfg)
    started = _now()
    summary = _DISPATCH[cfg.mode](cfg, writer, workers)
    manifest = {"config_hash": cfg.hash, "code_version": code_version(),
                "mode": cfg.mode, "started": started, "finished": _now(),
                "base_seed": cfg.seed,
                "replica_seeds": [mix_seed(cfg.seed, i)
                                  for i in range(cfg.replicas)],
                "workers": workers, "config": cfg.doc,
                "files": list(writer.files), "summary": summary}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n",
                    encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def load_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise OSError(f"{path}: corrupt manifest ({exc})") from None
    for name in doc.get("files", []):
        if not (path.parent / name).is_file():
            raise OSError(f"missing output file {name}")
    return doc


def _yes(x):
    return "true" if x else "false"


def report(manifest_path):
    """Write ``summary.txt`` and two-column ``.dat`` files next to the manifest."""
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    base = manifest_path.parent
    mode, s = doc["mode"], doc["summary"]
    lines = [f"mode: {mode}", f"config_hash: {doc['config_hash']}",
             f"base_seed: {doc['base_seed']}"]
    dat = []
    for name in doc["files"]:
        if not name.endswith(".csv"):
            continue
        try:
            _, cols, data = diagnostics.read_csv(base / name)
        except (ValueError, IndexError) as exc:
            raise OSError(f"{name}: corrupt CSV ({exc})") from None
        stem = name[:-4]
        if cols[0] in ("t", "w", "y", "epsilon", "trial"):
            for j, col in enumerate(cols[1:], start=1):
                if stem.startswith("series") and col not in ("H", "l1_to_eq",
                                                             "I_delta"):
                    continue
                out = base / f"{stem}_{col}.dat"
                np.savetxt(out, data[:, [0, j]], fmt="%.17g",
                           header=f"{cols[0]} {col}")
                dat.append(out.name)
    if mode.startswith("fp-"):
        rate = s.get("fitted_H_rate")
        lines += [f"fitted_H_rate: {rate if rate is not None else 'n/a'}",
                  f"two_rho_delta: {s.get('two_rho_delta') if s.get('two_rho_delta') is not None else 'n/a'}",
                  "bound_satisfied: " + ("n/a" if s.get("bound_satisfied") is None
                                         else _yes(s["bound_satisfied"])),
                  f"mass_drift: {s['mass_drift']}", f"mean_drift: {s['mean_drift']}"]
    elif mode.startswith("mc-"):
        for r in s["replicas"]:
            pre = f"replica {r['index']} (seed {r['seed']})"
            if "mean_bound" in r:
                lines.append(f"{pre}: mean_bound {r['mean_bound']} "
                             f"max excess {r['mean_bound_excess_se']:.3f} SE; "
                             f"m2_bound {r['m2_bound']} max excess "
                             f"{r['m2_bound_excess_se']:.3f} SE")
            if "hist_l1" in r:
                lines.append(f"{pre}: histogram L1 {r['hist_l1']:.4f}, "
                             f"normalised variance {r['normalized_var']:.4f} "
                             f"(reference {r['reference_var']:.4f})")
            lines.append(f"{pre}: final mean {r['final_mean']:.6f} "
                         f"+- {r['mean_se']:.2e}")
        if "mean_bound_satisfied" in s:
            lines.append("mean_bound_satisfied: " + _yes(s["mean_bound_satisfied"]))
            lines.append("m2_bound_satisfied: " + _yes(s["m2_bound_satisfied"]))
    elif mode == "grazing-study":
        for e, l1 in s["l1_by_epsilon"].items():
            lines.append(f"epsilon {e}: L1(MC, FP) = {l1:.5f}")
        lines.append("monotone_decreasing: " + _yes(s["monotone_decreasing"]))
    elif mode == "lsi-audit":
        lines.append(f"worst_lsi_ratio: {s['worst_lsi_ratio']}")
        lines.append("worst_lsi_ratio_le_1: " + _yes(s["worst_lsi_ratio"] <= 1))
        for d, r in s["by_delta"].items():
            lines.append(f"delta {d}: worst {r['worst_ratio']:.6f}, "
                         f"coordinate gap {r['max_coordinate_gap']:.2e}")
    elif mode == "steady":
        lines.append(f"rho_delta: {s.get('rho_delta')}")
        lines.append(f"tail_exponent: {s['tail_exponent']}")
    text = "\n".join(lines) + "\n"
    (base / "summary.txt").write_text(text, encoding="utf-8")
    return text, dat
