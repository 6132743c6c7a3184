"""Acceptance suites: each returns gated pass/fail criteria plus the tables behind them.

Suites and criteria:

* ``identities``: exact-class identities (1), constant-coefficient degeneration (2),
  one-dimensional closed forms (3);
* ``refinement``: discretisation-order residuals under grid doubling (4);
* ``scaling``: two-scale accuracy (5) and variance scaling (6);
* ``fluctuations``: pathwise gap between commutator and standard commutator (7);
* ``normality``: normal approximation (8) and leading covariance structure (9);
* ``sensitivity``: noise-derivative checks (10).

Test functions, probe sets and seeds are fixed by the constants below, chosen
before any acceptance run.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import calculus as dc
from .commutators import (commutator, duality_residual, hill_mandel_residual,
                          pooled_duality_residual, pooled_reduction_residual,
                          reduction_identity_residual, standard_commutator_explicit,
                          standard_commutator_taylor)
from .config import RunConfig
from .correctors import build_hierarchy, symmetry_identity_residual
from .fluctuations import (Calibration, EnsembleConfig, EnsembleError, ObservableSpec, calibrate,
                           estimate_Q_leading, linear_functional_variance, malliavin_fd_check,
                           moment_stats, normal_quantiles, normality_metrics, observable_functional,
                           poincare_check, run_ensemble, sample_field_coefficient, scaling_fit,
                           standardize)
from .gaussian_field import (CoefficientMapSpec, TorusGrid, build_gaussian_field, coarsen_noise,
                             constant_coefficient, raised_cosine_kernel, sample_coefficient,
                             sample_white_noise)
from .two_scale import (homogenized_cascade, intertwining_residual, link_identity_residual,
                        random_trig, random_vector_trig, solve_heterogeneous)

log = logging.getLogger(__name__)

# fixed test-function streams
TEST_FUNCTION_SEED = 2024
PROBE_SEED = 77
REFINEMENT_SEED = 1
REFINEMENT_TEST_SEED = 0
N_TRAIN_PROBES = 16
N_HELDOUT_PROBES = 4
POOLED_PAIRS = 6
POINCARE_VARIANCE_SEEDS = 400
POINCARE_BLOCK = 4
IDENTITY_TOL = 1e-8


class MissingCalibrationError(EnsembleError):
    pass


@dataclass
class CriterionResult:
    key: int
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    runtime: float = 0.0

    def line(self) -> str:
        return f"criterion {self.key:>2} [{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.summary}"


@dataclass
class SuiteResult:
    name: str
    criteria: list
    tables: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def summary(self) -> dict:
        return {"suite": self.name, "passed": self.passed,
                "criteria": [asdict(c) for c in self.criteria], "series": self.series}


# ---------------------------------------------------------------- calibrations

class CalibrationCache:
    """Calibrations computed on demand and kept in memory (optionally persisted)."""

    def __init__(self, seeds, n_max: int = 1, workers: int = 1, store=None):
        self.seeds = list(seeds)
        self.n_max = n_max
        self.workers = workers
        self.store = store
        self._mem = {}

    def __call__(self, config: EnsembleConfig) -> Calibration:
        key = config.digest
        if key not in self._mem:
            cal = self.store.load(config) if self.store is not None else None
            if cal is None:
                cal = calibrate(config, self.seeds, self.n_max, self.workers)
                if self.store is not None:
                    self.store.save(config, cal)
            self._mem[key] = cal
        return self._mem[key]


class CalibrationStore:
    """Calibrations persisted as JSON under ``root`` keyed by the ensemble digest."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, config: EnsembleConfig) -> Path:
        return self.root / f"calibration-{config.digest}.json"

    def load(self, config: EnsembleConfig) -> Calibration | None:
        import json

        p = self.path(config)
        if not p.exists():
            return None
        return Calibration.from_dict(json.loads(p.read_text())["calibration"])

    def save(self, config: EnsembleConfig, cal: Calibration) -> Path:
        from .io import write_csv, write_json

        p = write_json(self.path(config), {"ensemble": config.to_dict(), "calibration": cal.to_dict()})
        rows = []
        for tag, tensors in (("primal", cal.tensors), ("dual", cal.dual_tensors)):
            for t in tensors[1:]:
                for idx in np.ndindex(*t.entries.shape):
                    rows.append({"tensor": tag, "order": t.order,
                                 "index": "".join(map(str, idx)),
                                 "value": float(t.entries[idx]),
                                 "stderr": float(t.stderr[idx]) if t.stderr is not None else 0.0})
        write_csv(p.with_suffix(".csv"), rows, ["tensor", "order", "index", "value", "stderr"])
        return p

    def __call__(self, config: EnsembleConfig) -> Calibration:
        cal = self.load(config)
        if cal is None:
            raise MissingCalibrationError(
                f"no calibration for eps={config.eps} in {self.root}; run `homoglab calibrate` first")
        return cal


# ---------------------------------------------------------------- helpers

def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.runtime = time.perf_counter() - t0
        log.info(res.line())
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def test_functions(d: int):
    """Fixed source ``f``, test field ``g`` and slow profile ``w``."""
    rng = np.random.default_rng(TEST_FUNCTION_SEED)
    f = random_vector_trig(d, rng, 2, 1)
    g = random_vector_trig(d, rng, 2, 1)
    w = random_trig(d, rng, 2, 1)
    return f, g, w


def probe_set(d: int):
    rng = np.random.default_rng(PROBE_SEED)
    n = N_TRAIN_PROBES + N_HELDOUT_PROBES
    return [(random_vector_trig(d, rng, 2, 1), random_trig(d, rng, 2, 1)) for _ in range(n)]


def _rel_max(x, ref) -> float:
    nr = float(np.abs(ref).max())
    nx = float(np.abs(x).max())
    return nx / nr if nr > 0 else nx


# ---------------------------------------------------------------- identities

def exact_identity_residuals(coef, cs, ds, w, w2, f, g, tol: float) -> dict:
    """Exact-class residuals of one sample (all relative)."""
    d = coef.d
    out = {}
    out["corrector_equation"] = max(max(r.residual for r in cs.reports[n].values())
                                    for n in cs.reports)
    mq = 0.0
    skew = 0.0
    divs = 0.0
    for n in range(1, cs.n_max + 1):
        q = cs.q[n]
        flat = q.reshape(q.shape[:-d] + (-1,))
        mq = max(mq, float(np.abs(flat.mean(axis=-1)).max() / max(np.abs(q).max(), 1e-300)))
        for I in product(range(d), repeat=n):
            sig = cs.sigma[n][I]
            for i, k in product(range(d), repeat=2):
                skew = max(skew, float(np.abs(dc.skew_component(sig, i, k, d)
                                              + dc.skew_component(sig, k, i, d)).max()))
        divs = max(divs, cs.residuals[n]["div_sigma_minus_q"])
    out["mean_flux"] = mq
    out["sigma_skew"] = skew
    out["div_sigma_flux"] = divs
    out["link_identity"] = max(link_identity_residual(cs, w, n, exact=True)
                               for n in range(1, cs.n_max + 1))
    grid = coef.grid
    H = dc.grad(w(grid), grid.macro_spacing, d)
    out["order_zero_commutator"] = _rel_max(commutator(coef, cs.abar, H, 0) - coef.operator(H),
                                            coef.operator(H))
    out["duality_n1"] = duality_residual(coef, cs.abar, ds.abar, w, w2, 1)
    out["reduction_n1"] = reduction_identity_residual(coef, cs.abar, ds.abar, f, g, 1, tol=tol).relative
    return out


@_timed
def criterion_exact_identities(config: RunConfig, seeds=range(5), N: int = 64) -> CriterionResult:
    """Exact-class identities on d=2, N=64, orders up to 2, per-sample tensors."""
    d = 2
    rng = np.random.default_rng(TEST_FUNCTION_SEED)
    w, w2 = random_trig(d, rng, 3, 2), random_trig(d, rng, 3, 2)
    f, g, _ = test_functions(d)
    rows = []
    for kind in config.identity_maps:
        ec = EnsembleConfig(d=d, eps=1.0 / (N * config.h), h=config.h,
                            kernel_radius=config.data["ensemble"]["kernel"]["radius"],
                            kernel_power=config.data["ensemble"]["kernel"]["power"],
                            coefficient=config.coefficient(kind), tol=config.tol)
        for s in seeds:
            coef = sample_field_coefficient(ec, s)
            cs = build_hierarchy(coef, 2, config.tol)
            ds = cs if coef.is_symmetric else build_hierarchy(coef.transpose(), 2, config.tol)
            res = exact_identity_residuals(coef, cs, ds, w, w2, f, g, config.tol)
            rows.extend({"identity": k, "map": kind, "n": 2, "N": N, "seed": s, "residual": v,
                         "tensors": "per-sample"} for k, v in res.items())
    worst = max(rows, key=lambda r: r["residual"])
    ok = worst["residual"] <= IDENTITY_TOL
    return CriterionResult(1, "exact-class identity suite", ok,
                           f"max relative residual {worst['residual']:.2e} ({worst['identity']}, "
                           f"{worst['map']}) <= {IDENTITY_TOL:g}", {"rows": rows})


@_timed
def criterion_constant_coefficient(config: RunConfig, value: float = 0.7, N: int = 32) -> CriterionResult:
    """With ``a = c Id`` every corrector quantity and commutator vanishes."""
    d = 2
    grid = TorusGrid(d, N, N * config.h)
    coef = constant_coefficient(grid, value)
    cs = build_hierarchy(coef, 2, config.tol)
    f, g, w = test_functions(d)
    vals = {}
    for n in (1, 2):
        vals[f"phi{n}"] = float(np.abs(cs.phi[n]).max())
        vals[f"q{n}"] = float(np.abs(cs.q[n]).max())
        vals[f"sigma{n}"] = float(np.abs(cs.sigma[n]).max())
    vals["abar1_minus_cId"] = float(np.abs(cs.abar[1].entries - value * np.eye(d)).max())
    vals["abar2"] = float(np.abs(cs.abar[2].entries).max())
    sol = solve_heterogeneous(coef, f, config.tol)
    for n in (1, 2):
        vals[f"Xi{n}"] = float(np.abs(commutator(coef, cs.abar, sol.grad, n)).max())
        vals[f"Xi_standard{n}"] = float(np.abs(standard_commutator_explicit(coef, cs, w, n)).max())
    casc = homogenized_cascade(cs.abar, f, 2, grid)
    vals["cascade_correction"] = float(np.abs(casc.assembled() - casc.components[0]).max())
    bound = 100 * config.tol
    worst = max(vals, key=vals.get)
    ok = vals[worst] <= bound
    return CriterionResult(2, "constant-coefficient degeneration", ok,
                           f"max {vals[worst]:.2e} ({worst}) <= {bound:g}", vals)


@_timed
def criterion_one_dimensional(config: RunConfig, seeds=range(20), N: int = 64) -> CriterionResult:
    """1-D: effective coefficient is the harmonic mean, corrector gradient in closed form."""
    ec = EnsembleConfig(d=1, eps=1.0 / (N * config.h), h=config.h,
                        kernel_radius=config.data["ensemble"]["kernel"]["radius"],
                        kernel_power=config.data["ensemble"]["kernel"]["power"],
                        coefficient=config.coefficient(), tol=min(config.tol, 1e-13))
    worst_a = worst_g = 0.0
    for s in seeds:
        coef = sample_field_coefficient(ec, s)
        cs = build_hierarchy(coef, 1, ec.tol)
        edge = coef.operator.edge_diag[0]
        hm = 1.0 / np.mean(1.0 / edge)
        abar = cs.abar[1].entries[0, 0]
        worst_a = max(worst_a, abs(abar - hm) / hm)
        gphi = dc.grad(cs.phi[1][0], ec.grid.h, 1)[0]
        worst_g = max(worst_g, float(np.abs(gphi - (abar / edge - 1.0)).max()))
    ok = worst_a <= 1e-12 and worst_g <= 1e-10
    return CriterionResult(3, "one-dimensional oracle", ok,
                           f"harmonic-mean gap {worst_a:.2e} <= 1e-12, gradient gap {worst_g:.2e} <= 1e-10",
                           {"abar_gap": worst_a, "gradient_gap": worst_g})


def run_identities(config: RunConfig, **_) -> SuiteResult:
    c1 = criterion_exact_identities(config)
    c2 = criterion_constant_coefficient(config)
    c3 = criterion_one_dimensional(config)
    rows = c1.details.pop("rows")
    return SuiteResult("identities", [c1, c2, c3], {"identities": rows})


# ---------------------------------------------------------------- refinement

REFINEMENT_NAMES = ("symmetry_n2", "hill_mandel_n1", "hill_mandel_n2", "intertwining_n1",
                    "taylor_vs_explicit_n2", "duality_n2", "reduction_n2")


def refinement_residuals(kind: str, Ns=(32, 64, 128), L: float = 8.0, seed: int = REFINEMENT_SEED,
                         radius: float = 1.0, power: int = 1, tol: float = 1e-12) -> dict:
    """Refinement-class residuals at each ``N`` with noise coarse-grained from the finest grid."""
    d = 2
    rng = np.random.default_rng(REFINEMENT_TEST_SEED)
    pairs = [(random_trig(d, rng, 3), random_trig(d, rng, 3)) for _ in range(POOLED_PAIRS)]
    sources = [(random_vector_trig(d, rng), random_vector_trig(d, rng)) for _ in range(POOLED_PAIRS)]
    f, _, w = test_functions(d)
    Ns = sorted(Ns)
    noise = {Ns[-1]: sample_white_noise(TorusGrid(d, Ns[-1], L), 1, seed)}
    for N in reversed(Ns[:-1]):
        noise[N] = coarsen_noise(noise[2 * N])
    spec = CoefficientMapSpec(kind)
    out = {k: [] for k in REFINEMENT_NAMES}
    for N in Ns:
        grid = TorusGrid(d, N, L)
        coef, _ = sample_coefficient(grid, raised_cosine_kernel(d, grid.h, radius, 1, power), spec,
                                     seed, noise=noise[N])
        cs = build_hierarchy(coef, 2, tol)
        ds = cs if coef.is_symmetric else build_hierarchy(coef.transpose(), 2, tol)
        out["symmetry_n2"].append(symmetry_identity_residual(cs, ds, 2))
        out["hill_mandel_n1"].append(hill_mandel_residual(coef, cs, ds, f, 1))
        out["hill_mandel_n2"].append(hill_mandel_residual(coef, cs, ds, f, 2))
        out["intertwining_n1"].append(intertwining_residual(coef, cs, w, 1))
        ex = standard_commutator_explicit(coef, cs, w, 2)
        ty = standard_commutator_taylor(coef, cs, w, 2)
        out["taylor_vs_explicit_n2"].append(_rel_max(ty - ex, ex))
        out["duality_n2"].append(pooled_duality_residual(coef, cs.abar, ds.abar, pairs, 2))
        out["reduction_n2"].append(pooled_reduction_residual(coef, cs.abar, ds.abar, sources, 2, tol))
    return out


@_timed
def criterion_refinement(config: RunConfig, Ns=(32, 64, 128), factor: float = 1.5) -> CriterionResult:
    """Each refinement-class residual decays by ``factor`` per grid doubling."""
    e = config.data["ensemble"]["kernel"]
    rows, worst = [], (math.inf, "")
    for kind in config.identity_maps:
        res = refinement_residuals(kind, Ns, radius=e["radius"], power=e["power"])
        for name, vals in res.items():
            for N, v in zip(Ns, vals):
                rows.append({"residual": name, "map": kind, "N": N, "h": 8.0 / N, "value": v})
            for a, b in zip(vals[:-1], vals[1:]):
                r = a / b if b > 0 else math.inf
                if r < worst[0]:
                    worst = (r, f"{name}, {kind}")
    ok = worst[0] >= factor
    return CriterionResult(4, "refinement suite", ok,
                           f"smallest decay per doubling {worst[0]:.2f} ({worst[1]}) >= {factor}",
                           {"rows": rows})


def run_refinement(config: RunConfig, **_) -> SuiteResult:
    c4 = criterion_refinement(config)
    rows = c4.details.pop("rows")
    return SuiteResult("refinement", [c4], {"refinement": rows}, {"refinement": rows})


# ---------------------------------------------------------------- Monte Carlo suites

def _observables(d: int) -> list[ObservableSpec]:
    f, g, w = test_functions(d)
    return [ObservableSpec("field-average", 0, g=g, f=f, name="field_average"),
            ObservableSpec("standard-commutator", 1, g=g, f=f, name="standard_commutator"),
            ObservableSpec("pathwise-gap", 1, g=g, f=f, name="pathwise_gap"),
            ObservableSpec("expansion-error", 1, f=f, name="expansion_error")]


class _Ensembles:
    """Per-eps ensembles shared between the scaling and fluctuation suites."""

    def __init__(self, config: RunConfig, calibrations, field_cache=None):
        self.config = config
        self.calibrations = calibrations
        self.field_cache = field_cache
        self._res = {}

    def __call__(self, eps: float, seeds=None):
        seeds = tuple(self.config.seeds() if seeds is None else seeds)
        key = (eps, seeds)
        if key not in self._res:
            ec = self.config.ensemble_config(eps)
            cal = self.calibrations(ec)
            self._res[key] = run_ensemble(_observables(ec.d), ec, seeds, cal,
                                          workers=self.config.threads, field_cache=self.field_cache)
        return self._res[key]


def _series_rows(eps_list, fit, observable, statistic):
    return [{"observable": observable, "statistic": statistic, "eps": float(e), "value": float(v),
             "stderr": float(s)} for e, v, s in zip(eps_list, fit.y, fit.y_se)]


@_timed
def criterion_two_scale(config: RunConfig, ensembles, n_seeds: int = 50) -> CriterionResult:
    eps = config.eps_list
    groups = [ensembles(e).column("expansion_error")[:n_seeds] for e in eps]
    fit = scaling_fit(eps, groups, "mean", predicted=1.0)
    ok = 0.7 <= fit.slope <= 1.3
    return CriterionResult(5, "two-scale accuracy", ok,
                           f"slope {fit.slope:.3f} +- {fit.slope_se:.3f} in [0.7, 1.3]",
                           {"slope": fit.slope, "slope_se": fit.slope_se, "means": fit.y.tolist(),
                            "series": _series_rows(eps, fit, "expansion_error", "mean")})


@_timed
def criterion_clt_scaling(config: RunConfig, ensembles) -> CriterionResult:
    eps = config.eps_list
    d = config.d
    out, series, ok = {}, [], True
    for name in ("field_average", "standard_commutator"):
        fit = scaling_fit(eps, [ensembles(e).column(name) for e in eps], "variance", predicted=d)
        out[name] = {"slope": fit.slope, "slope_se": fit.slope_se, "variances": fit.y.tolist(),
                     "monotone": fit.monotone}
        series += _series_rows(eps, fit, name, "variance")
        ok &= abs(fit.slope - d) <= 0.3
    msg = ", ".join(f"{k} {v['slope']:.3f} +- {v['slope_se']:.3f}" for k, v in out.items())
    return CriterionResult(6, "CLT variance scaling", bool(ok), f"{msg}; target {d} +- 0.3",
                           {**out, "series": series})


def run_scaling(config: RunConfig, calibrations=None, field_cache=None, ensembles=None, **_) -> SuiteResult:
    ensembles = ensembles or _Ensembles(config, calibrations, field_cache)
    c5 = criterion_two_scale(config, ensembles)
    c6 = criterion_clt_scaling(config, ensembles)
    series = c5.details.pop("series") + c6.details.pop("series")
    tables = {f"values_eps{e:g}": ensembles(e).to_rows() for e in config.eps_list}
    return SuiteResult("scaling", [c5, c6], tables, {"scaling": series})


def _ratio(rows):
    return rows[..., 0, :].var(axis=-1, ddof=1) / rows[..., 1, :].var(axis=-1, ddof=1)


@_timed
def criterion_pathwise_gap(config: RunConfig, ensembles, factor: float = 1.5) -> CriterionResult:
    eps = config.eps_list
    groups = []
    for e in eps:
        r = ensembles(e)
        groups.append(np.stack([r.column("pathwise_gap", False), r.column("standard_commutator", False)], 1))
    fit = scaling_fit(eps, groups, _ratio)
    ratios = fit.ratios
    ok = bool(np.all(ratios >= factor))
    return CriterionResult(7, "pathwise gap", ok,
                           "variance ratio " + ", ".join(f"{v:.2e}" for v in fit.y)
                           + "; decay per halving " + ", ".join(f"{r:.2f}" for r in ratios)
                           + f" >= {factor}",
                           {"ratios": fit.y.tolist(), "decay": ratios.tolist(), "slope": fit.slope,
                            "series": _series_rows(eps, fit, "pathwise_gap_ratio", "variance-ratio")})


def run_fluctuations(config: RunConfig, calibrations=None, field_cache=None, ensembles=None, **_) -> SuiteResult:
    ensembles = ensembles or _Ensembles(config, calibrations, field_cache)
    c7 = criterion_pathwise_gap(config, ensembles)
    series = c7.details.pop("series")
    tables = {f"values_eps{e:g}": ensembles(e).to_rows() for e in config.eps_list}
    return SuiteResult("fluctuations", [c7], tables, {"scaling": series})


def normality_ensemble(config: RunConfig, calibrations, field_cache=None):
    """Standard commutator on the homogenized solution plus the probe set, smallest eps."""
    eps = min(config.eps_list)
    ec = config.ensemble_config(eps)
    f, g, _ = test_functions(ec.d)
    specs = [ObservableSpec("standard-commutator", 1, g=g, f=f, name="standard_commutator")]
    specs += [ObservableSpec("standard-commutator", 1, g=pg, w=pw, name=f"probe{i}")
              for i, (pg, pw) in enumerate(probe_set(ec.d))]
    return ec, run_ensemble(specs, ec, config.normality_seeds, calibrations(ec),
                            workers=config.threads, field_cache=field_cache)


@_timed
def criterion_normality(config: RunConfig, result) -> CriterionResult:
    x = result.column("standard_commutator")
    nm = normality_metrics(x)
    ms = moment_stats(x)
    ok = nm.ks <= 0.12 and abs(nm.skewness) <= 0.35 and abs(nm.excess_kurtosis) <= 0.8
    z = np.sort(standardize(x))
    qq = [{"observable": "standard_commutator", "k": k + 1, "theoretical": float(t), "sample": float(s)}
          for k, (t, s) in enumerate(zip(normal_quantiles(len(z)), z))]
    centering = abs(ms.mean) / ms.mean_se if ms.mean_se > 0 else 0.0
    return CriterionResult(8, "normality", bool(ok),
                           f"KS {nm.ks:.3f} <= 0.12, skewness {nm.skewness:+.3f} (|.| <= 0.35), "
                           f"excess kurtosis {nm.excess_kurtosis:+.3f} (|.| <= 0.8); n = {nm.count}",
                           {"ks": nm.ks, "ks_pvalue": nm.ks_pvalue, "w2": nm.w2,
                            "skewness": nm.skewness, "excess_kurtosis": nm.excess_kurtosis,
                            "total_variation": nm.total_variation,
                            "null_bands_4se": nm.null_bands(4.0),
                            "mean_over_stderr": centering, "qq": qq})


@_timed
def criterion_covariance(config: RunConfig, ec, result) -> CriterionResult:
    probes = probe_set(ec.d)
    V = np.stack([result.column(f"probe{i}", False) for i in range(len(probes))], 1)
    nt = N_TRAIN_PROBES
    q = estimate_Q_leading(probes[:nt], V[:, :nt], ec.grid, probes[nt:], V[:, nt:])
    ok = all(h["ok"] for h in q.heldout)
    worst = max(q.heldout, key=lambda h: abs(h["predicted"] - h["observed"]) / h["band"])
    return CriterionResult(9, "covariance structure", ok,
                           f"{sum(h['ok'] for h in q.heldout)}/{len(q.heldout)} held-out probes within "
                           f"3 (stderr + fit residual); worst |pred - obs| = "
                           f"{abs(worst['predicted'] - worst['observed']):.3g} vs band {worst['band']:.3g}; "
                           f"condition {q.condition_number:.3g}",
                           {"Q": q.Q.tolist(), "fit_residual": q.fit_residual,
                            "condition_number": q.condition_number, "heldout": q.heldout,
                            "train_variances": q.train_variances.tolist()})


def run_normality(config: RunConfig, calibrations=None, field_cache=None, **_) -> SuiteResult:
    ec, result = normality_ensemble(config, calibrations, field_cache)
    c8 = criterion_normality(config, result)
    c9 = criterion_covariance(config, ec, result)
    qq = c8.details.pop("qq")
    return SuiteResult("normality", [c8, c9], {"values": result.to_rows()}, {"qq": qq})


# ---------------------------------------------------------------- sensitivity

@_timed
def criterion_sensitivity(config: RunConfig, deltas=(1e-3, 5e-4, 2.5e-4), eps: float = 1.0 / 16,
                          n_seeds: int = 100) -> CriterionResult:
    """Chain rule for the noise derivative of ``a`` and the first-order Poincare inequality."""
    ec = config.ensemble_config(eps)
    grid = ec.grid
    site = tuple(n // 3 for n in grid.shape)
    checks = [malliavin_fd_check(ec, 0, site, 0, dl, "forward") for dl in deltas]
    gaps = [c.gap for c in checks]
    halving = [a / b for a, b in zip(gaps[:-1], gaps[1:])]
    mall_ok = (all(c.gap <= c.bound for c in checks) and all(1.8 <= r <= 2.2 for r in halving)
               and all(c.support_exact for c in checks))
    # linear Gaussian functional: equality case, every site
    zeta = np.random.default_rng(TEST_FUNCTION_SEED).standard_normal((ec.kappa,) + grid.shape)
    kern = ec.kernel()

    def linear(noise):
        return float(np.sum(zeta * build_gaussian_field(noise, kern).values) * grid.h**grid.d)

    lin = poincare_check(ec, linear, [0], block=1, variance=linear_functional_variance(zeta, ec))
    f, g, _ = test_functions(ec.d)
    fun = observable_functional(ec, ObservableSpec("field-average", 0, g=g, f=f), tol=1e-12)
    seeds = config.seeds()[:n_seeds]
    start = seeds[0]
    nonlin = poincare_check(ec, fun, seeds, block=POINCARE_BLOCK,
                            variance_seeds=range(start, start + POINCARE_VARIANCE_SEEDS))
    lin_ok = abs(lin.ratio - 1.0) <= 1e-6
    nl_ok = nonlin.ratio <= 1.2
    ok = mall_ok and lin_ok and nl_ok
    summary = ("forward-difference gaps " + ", ".join(f"{g:.2e}" for g in gaps)
               + " (bounds " + ", ".join(f"{c.bound:.2e}" for c in checks) + "), halving "
               + ", ".join(f"{r:.2f}" for r in halving)
               + f"; Poincare ratio {nonlin.ratio:.3f} +- {nonlin.ratio_se:.3f} <= 1.2"
               + f"; linear functional |ratio - 1| = {abs(lin.ratio - 1):.1e} <= 1e-6")
    return CriterionResult(10, "sensitivity checks", bool(ok), summary,
                           {"malliavin": [asdict(c) for c in checks], "halving": halving,
                            "poincare": asdict(nonlin), "poincare_ratio_se": nonlin.ratio_se,
                            "linear": asdict(lin)})


def run_sensitivity(config: RunConfig, **_) -> SuiteResult:
    return SuiteResult("sensitivity", [criterion_sensitivity(config)])


SUITE_RUNNERS = {
    "identities": run_identities,
    "refinement": run_refinement,
    "scaling": run_scaling,
    "fluctuations": run_fluctuations,
    "normality": run_normality,
    "sensitivity": run_sensitivity,
}

NEEDS_CALIBRATION = ("scaling", "fluctuations", "normality")


def run_suite(name: str, config: RunConfig, calibrations=None, field_cache=None, **kwargs) -> SuiteResult:
    if name not in SUITE_RUNNERS:
        raise KeyError(f"unknown suite {name!r}; choose from {list(SUITE_RUNNERS)}")
    if name in NEEDS_CALIBRATION and calibrations is None:
        raise MissingCalibrationError(f"suite {name!r} needs calibrated tensors; run `homoglab calibrate`")
    return SUITE_RUNNERS[name](config, calibrations=calibrations, field_cache=field_cache, **kwargs)
