"""Monte Carlo engine and statistics for macroscopic observables of random media.

An ensemble is a list of seeds evaluated under one :class:`EnsembleConfig`.
Every seed runs the same pipeline (noise, field, coefficient, correctors as
needed, heterogeneous solve, observable) and is independent of the others, so
the values are a pure function of ``(seed, config, calibration)``.

Effective tensors inside commutators come from a frozen :class:`Calibration`
ensemble whose seeds must not overlap the evaluation seeds.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import calculus as dc
from .commutators import commutator, standard_commutator_explicit
from .correctors import HierarchyError, HomogenizedTensor, build_hierarchy, ensemble_tensors
from .gaussian_field import (CoefficientMapSpec, ConfigError, EllipticityError, KernelC0,
                             TorusGrid, WhiteNoiseSample, build_gaussian_field,
                             coefficient_from_field, covariance_kernel, raised_cosine_kernel,
                             sample_white_noise)
from .two_scale import (RateModel, TrigPolynomial, VectorTestFunction, homogenized_cascade,
                        expansion_error, solve_heterogeneous)

log = logging.getLogger(__name__)

__all__ = [
    "EnsembleConfig",
    "ObservableSpec",
    "Calibration",
    "calibrate",
    "EnsembleResult",
    "EnsembleError",
    "InsufficientSamplesError",
    "run_ensemble",
    "evaluate_seed",
    "MomentStats",
    "moment_stats",
    "ScalingFit",
    "fit_power_law",
    "scaling_fit",
    "NormalityMetrics",
    "normality_metrics",
    "QEstimate",
    "probe_features",
    "estimate_Q_leading",
    "MalliavinCheck",
    "malliavin_fd_check",
    "PoincareResult",
    "poincare_check",
    "linear_functional_variance",
    "observable_functional",
    "standardize",
    "normal_quantiles",
    "jackknife_se",
]


class EnsembleError(RuntimeError):
    """Every seed of an ensemble failed, or calibration is missing or reused."""


class InsufficientSamplesError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class EnsembleConfig:
    """Medium and discretisation shared by all seeds of an ensemble.

    ``h`` is the lattice spacing in microscopic units and ``eps = 1 / L``, so
    the grid has ``N = 1 / (eps h)`` cells per side.
    """

    d: int = 2
    eps: float = 1.0 / 8
    h: float = 0.5
    kernel_radius: float = 1.0
    kernel_power: int = 1
    kappa: int = 1
    coefficient: CoefficientMapSpec = field(default_factory=CoefficientMapSpec)
    tol: float = 1e-10

    def __post_init__(self):
        self.grid  # validates N

    @property
    def L(self) -> float:
        return 1.0 / self.eps

    @property
    def grid(self) -> TorusGrid:
        n = self.L / self.h
        N = int(round(n))
        if abs(n - N) > 1e-9:
            raise ConfigError(f"1/(eps h) = {n} is not an integer")
        return TorusGrid(self.d, N, self.L)

    def kernel(self) -> KernelC0:
        return raised_cosine_kernel(self.d, self.h, self.kernel_radius, self.kappa,
                                    self.kernel_power)

    def with_eps(self, eps: float) -> "EnsembleConfig":
        from dataclasses import replace

        return replace(self, eps=eps)

    def to_dict(self) -> dict:
        return {"d": self.d, "eps": self.eps, "h": self.h, "kernel_radius": self.kernel_radius,
                "kernel_power": self.kernel_power, "kappa": self.kappa,
                "coefficient": self.coefficient.to_dict(), "tol": self.tol}

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_KINDS = ("field-average", "commutator", "standard-commutator", "pathwise-gap",
          "corrector-average", "expansion-error")


@dataclass(frozen=True)
class ObservableSpec:
    """One scalar observable per seed.

    * ``field-average``: ``<g, grad u_eps>`` with ``-div(a grad u_eps) = div f``;
    * ``commutator``: ``<grad vbar^n, Xi^n[grad u_eps]>`` with ``vbar^n`` the dual cascade of ``g``;
    * ``standard-commutator``: ``<g, Xi°^n[grad w]>`` (with ``f`` instead of ``w``,
      ``w`` is the homogenized solution ``ubar^n`` of the source ``f``);
    * ``pathwise-gap``: ``<g, Xi^n[grad u_eps] - Xi°^n[grad ubar^n]>``;
    * ``corrector-average``: ``int w phi^n_I(./eps)`` for a scalar ``w``;
    * ``expansion-error``: ``||grad(u_eps - F^n[ubar^n])||``.

    Values are not rescaled by ``eps^(-d/2)``.
    """

    kind: str
    n: int = 1
    g: VectorTestFunction | None = None
    f: VectorTestFunction | None = None
    w: TrigPolynomial | None = None
    index: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown observable kind {self.kind!r}; choose from {_KINDS}")
        need = {"field-average": ("g", "f"), "commutator": ("g", "f"),
                "standard-commutator": ("g",), "pathwise-gap": ("g", "f"),
                "corrector-average": ("w",), "expansion-error": ("f",)}[self.kind]
        for attr in need:
            if getattr(self, attr) is None:
                raise ConfigError(f"{self.kind} observable needs test function {attr!r}")
        if self.kind == "standard-commutator" and (self.w is None) == (self.f is None):
            raise ConfigError("standard-commutator needs exactly one of w or f")
        if self.n < (0 if self.kind == "field-average" else 1):
            raise ConfigError(f"order must be >= 1 for {self.kind}")
        if self.kind == "corrector-average" and len(self.index) != self.n:
            raise ConfigError(f"corrector-average needs a multi-index of length {self.n}")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}-n{self.n}"

    @property
    def hierarchy_order(self) -> int:
        """Corrector levels needed on each sample (0 if none)."""
        return self.n if self.kind in ("standard-commutator", "pathwise-gap",
                                       "corrector-average", "expansion-error") else 0

    @property
    def needs_calibration(self) -> bool:
        return self.kind in ("commutator", "standard-commutator", "pathwise-gap",
                             "expansion-error")

    @property
    def needs_dual(self) -> bool:
        return self.kind == "commutator"

    @property
    def cascade_order(self) -> int:
        if self.kind == "standard-commutator":
            return self.n if self.w is None else 0
        return self.n if self.kind in ("commutator", "pathwise-gap", "expansion-error") else 0


# ---------------------------------------------------------------- calibration

@dataclass
class Calibration:
    """Ensemble-averaged effective tensors for ``a`` and ``a^T`` with their seeds."""

    config_digest: str
    seeds: tuple
    tensors: list = field(repr=False)
    dual_tensors: list = field(repr=False)

    @property
    def n_max(self) -> int:
        return len(self.tensors) - 1

    @property
    def id(self) -> str:
        m = hashlib.sha256()
        m.update(self.config_digest.encode())
        m.update(json.dumps(list(self.seeds)).encode())
        for t in self.tensors[1:] + self.dual_tensors[1:]:
            m.update(np.ascontiguousarray(t.entries, dtype="<f8").tobytes())
        return m.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "seeds": list(self.seeds), "id": self.id,
                "tensors": [t.to_dict() for t in self.tensors[1:]],
                "dual_tensors": [t.to_dict() for t in self.dual_tensors[1:]]}

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        cal = cls(data["config_digest"], tuple(int(s) for s in data["seeds"]),
                  [None] + [HomogenizedTensor.from_dict(t) for t in data["tensors"]],
                  [None] + [HomogenizedTensor.from_dict(t) for t in data["dual_tensors"]])
        if "id" in data and data["id"] != cal.id:
            raise EnsembleError(f"calibration id mismatch: stored {data['id']}, recomputed {cal.id}")
        return cal


def sample_field_coefficient(config: EnsembleConfig, seed: int, noise: WhiteNoiseSample | None = None,
                             method: str = "auto"):
    """Coefficient field of one seed (``noise`` overrides the seeded draw)."""
    grid = config.grid
    if noise is None:
        noise = sample_white_noise(grid, config.kappa, seed)
    G = build_gaussian_field(noise, config.kernel(), method)
    return coefficient_from_field(G, config.coefficient)


def calibrate(config: EnsembleConfig, seeds: Sequence[int], n_max: int = 1,
              workers: int = 1) -> Calibration:
    """Average per-sample effective tensors of ``a`` and ``a^T`` over ``seeds``."""
    seeds = tuple(sorted(int(s) for s in seeds))
    if len(set(seeds)) != len(seeds):
        raise EnsembleError("calibration seeds repeat")
    per_seed = _map(_calibrate_one, [(config, s, n_max) for s in seeds], workers)
    prim = [p for p, _ in per_seed]
    dual = [q for _, q in per_seed]
    return Calibration(config.digest, seeds, ensemble_tensors(prim), ensemble_tensors(dual))


def _calibrate_one(args):
    config, seed, n_max = args
    coef = sample_field_coefficient(config, seed)
    cs = build_hierarchy(coef, n_max, config.tol)
    ds = cs if coef.is_symmetric else build_hierarchy(coef.transpose(), n_max, config.tol)
    return cs.abar, ds.abar


def _map(fun, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fun(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fun, items))


# ---------------------------------------------------------------- ensemble engine

@dataclass
class EnsembleResult:
    config_digest: str
    calibration_id: str | None
    seeds: list
    names: list
    values: np.ndarray = field(repr=False)
    reports: dict = field(default_factory=dict, repr=False)
    failures: dict = field(default_factory=dict)

    def column(self, name: str, drop_failed: bool = True) -> np.ndarray:
        v = self.values[:, self.names.index(name)]
        return v[np.isfinite(v)] if drop_failed else v

    def to_rows(self) -> list[dict]:
        rows = []
        for s, vals in zip(self.seeds, self.values):
            row = {"seed": s}
            row.update({n: float(v) for n, v in zip(self.names, vals)})
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "calibration_id": self.calibration_id,
                "seeds": list(self.seeds), "names": list(self.names),
                "values": self.values.tolist(), "failures": {str(k): v for k, v in self.failures.items()}}


def _value(spec: ObservableSpec, coef, cache: dict, calibration: Calibration | None, tol: float):
    grid = coef.grid
    d, vol = grid.d, grid.macro_volume
    n = spec.n

    def solution(f):
        key = ("u", id(f))
        if key not in cache:
            cache[key] = solve_heterogeneous(coef, f, tol)
            cache.setdefault("reports", []).append(cache[key].report)
        return cache[key]

    def hierarchy():
        if cache.get("cs") is None:
            cache["cs"] = build_hierarchy(coef, cache["order"], tol)
        return cache["cs"]

    tensors = calibration.tensors if calibration is not None else None
    if spec.kind == "field-average":
        return dc.inner(spec.g.edge_values(grid), solution(spec.f).grad, vol)
    if spec.kind == "commutator":
        casc = homogenized_cascade(calibration.dual_tensors, spec.g, n, grid, dual=True)
        gv = dc.grad(casc.assembled(), grid.macro_spacing, d)
        return dc.inner(gv, commutator(coef, tensors, solution(spec.f).grad, n), vol)
    if spec.kind == "standard-commutator":
        w = spec.w if spec.w is not None else homogenized_cascade(tensors, spec.f, n, grid).field()
        Xi = standard_commutator_explicit(coef, hierarchy(), w, n, tensors)
        return dc.inner(spec.g.edge_values(grid), Xi, vol)
    if spec.kind == "pathwise-gap":
        casc = homogenized_cascade(tensors, spec.f, n, grid)
        Xi = commutator(coef, tensors, solution(spec.f).grad, n)
        Xo = standard_commutator_explicit(coef, hierarchy(), casc.field(), n, tensors)
        return dc.inner(spec.g.edge_values(grid), Xi - Xo, vol)
    if spec.kind == "corrector-average":
        phi = hierarchy().phi[n][tuple(spec.index)]
        return float(np.sum(spec.w(grid) * phi) * vol)
    if spec.kind == "expansion-error":
        casc = homogenized_cascade(tensors, spec.f, n, grid)
        return expansion_error(solution(spec.f), hierarchy(), casc, n)
    raise ConfigError(spec.kind)  # unreachable: kinds validated on construction


_RECOVERABLE = (dc.SolverError, HierarchyError, EllipticityError, np.linalg.LinAlgError,
                FloatingPointError)


def evaluate_seed(config: EnsembleConfig, specs: Sequence[ObservableSpec], seed: int,
                  calibration: Calibration | None = None, noise: WhiteNoiseSample | None = None,
                  field_cache=None):
    """Observable values for one seed and the solver reports behind them."""
    if field_cache is not None and noise is None:
        coef = field_cache(config, seed)
    else:
        coef = sample_field_coefficient(config, seed, noise)
    cache = {"order": max((s.hierarchy_order for s in specs), default=0)}
    vals = [float(_value(s, coef, cache, calibration, config.tol)) for s in specs]
    reports = [{"iterations": r.iterations, "residual": r.residual, "converged": r.converged}
               for r in cache.get("reports", [])]
    if cache.get("cs") is not None:
        for lvl, reps in cache["cs"].reports.items():
            reports.extend({"level": lvl, "iterations": r.iterations, "residual": r.residual,
                            "converged": r.converged} for r in reps.values())
    return vals, reports


def _evaluate_task(args):
    config, specs, seed, calibration, field_cache = args
    try:
        vals, reps = evaluate_seed(config, specs, seed, calibration, field_cache=field_cache)
        return seed, vals, reps, None
    except _RECOVERABLE as exc:
        return seed, [math.nan] * len(specs), [], f"{type(exc).__name__}: {exc}"


def run_ensemble(specs: ObservableSpec | Sequence[ObservableSpec], config: EnsembleConfig,
                 seeds: Sequence[int], calibration: Calibration | None = None,
                 workers: int = 1, field_cache=None) -> EnsembleResult:
    """Evaluate observables on every seed; failed seeds are recorded as NaN rows."""
    if isinstance(specs, ObservableSpec):
        specs = [specs]
    specs = list(specs)
    names = [s.label for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"observable names must be unique: {names}")
    seeds = sorted(int(s) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise EnsembleError("evaluation seeds repeat")
    if any(s.needs_calibration for s in specs):
        if calibration is None:
            raise EnsembleError("these observables need deterministic effective tensors; "
                                "run calibrate first")
        order = max(s.n for s in specs)
        if calibration.n_max < order:
            raise EnsembleError(f"calibration has order {calibration.n_max}, need {order}")
    if calibration is not None:
        if calibration.config_digest != config.digest:
            raise EnsembleError("calibration was built for a different configuration")
        overlap = set(seeds) & set(calibration.seeds)
        if overlap:
            raise EnsembleError(f"seeds {sorted(overlap)[:5]} are shared with the calibration")
    out = _map(_evaluate_task, [(config, specs, s, calibration, field_cache) for s in seeds], workers)
    values = np.array([v for _, v, _, _ in out], float).reshape(len(seeds), len(specs))
    reports = {s: r for s, _, r, _ in out}
    failures = {s: e for s, _, _, e in out if e is not None}
    for s, e in failures.items():
        log.warning("seed %d failed: %s", s, e)
    if seeds and len(failures) == len(seeds):
        raise EnsembleError(f"all {len(seeds)} seeds failed; first: {next(iter(failures.values()))}")
    return EnsembleResult(config.digest, calibration.id if calibration else None, seeds, names,
                          values, reports, failures)


# ---------------------------------------------------------------- moments

def _clean(values) -> np.ndarray:
    x = np.asarray(values, float).ravel()
    # sorting makes every statistic exactly invariant under seed permutations
    return np.sort(x[np.isfinite(x)])


def _loo_stats(x: np.ndarray, fun: Callable[[np.ndarray], np.ndarray], chunk: int = 256):
    """``fun`` applied to every leave-one-out subsample (rows of a 2-D array)."""
    n = len(x)
    out = []
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        mask = np.ones((len(idx), n), bool)
        mask[np.arange(len(idx)), idx] = False
        out.append(fun(x[None, :].repeat(len(idx), 0)[mask].reshape(len(idx), n - 1)))
    return np.concatenate(out)


def jackknife_se(x: np.ndarray, fun: Callable[[np.ndarray], np.ndarray]) -> float:
    """Leave-one-out jackknife standard error of a statistic acting on rows."""
    n = len(x)
    th = _loo_stats(x, fun)
    return float(np.sqrt((n - 1) / n * np.sum((th - th.mean()) ** 2)))


def _central_moment(p):
    def fun(rows):
        m = rows.mean(axis=1, keepdims=True)
        if p == 2:
            return np.sqrt(np.sum((rows - m) ** 2, axis=1) / (rows.shape[1] - 1))
        return np.mean(np.abs(rows - m) ** p, axis=1) ** (1.0 / p)
    return fun


@dataclass
class MomentStats:
    """Mean, unbiased variance and centred moments ``N_p = E|X - EX|^p ^(1/p)``.

    ``N_2`` is the square root of the unbiased variance; the others use the
    plain sample average. ``*_se`` are leave-one-out jackknife errors.
    """

    count: int
    mean: float
    mean_se: float
    variance: float
    variance_se: float
    N: dict
    N_se: dict


def moment_stats(values, orders: Sequence[int] = (1, 2, 4), min_variance: int = 30,
                 min_high: int = 100) -> MomentStats:
    """Moments of the finite samples in ``values`` (NaN entries are dropped)."""
    x = _clean(values)
    n = len(x)
    if n < min_variance:
        raise InsufficientSamplesError(f"{n} samples; variance needs at least {min_variance}")
    if any(p >= 4 for p in orders) and n < min_high:
        raise InsufficientSamplesError(f"{n} samples; moments of order >= 4 need {min_high}")
    var = float(np.var(x, ddof=1))
    var_fun = lambda r: np.var(r, axis=1, ddof=1)  # noqa: E731
    Np, Nse = {}, {}
    for p in orders:
        fun = _central_moment(p)
        Np[p] = float(fun(x[None, :])[0])
        Nse[p] = jackknife_se(x, fun)
    return MomentStats(n, float(x.mean()), float(np.sqrt(var / n)), var,
                       jackknife_se(x, var_fun), Np, Nse)


# ---------------------------------------------------------------- scaling fits

@dataclass
class ScalingFit:
    slope: float
    intercept: float
    slope_se: float
    x: np.ndarray
    y: np.ndarray
    y_se: np.ndarray
    z_scores: np.ndarray
    monotone: bool
    predicted: float | None = None

    @property
    def slope_z(self) -> float | None:
        if self.predicted is None or not self.slope_se > 0:
            return None
        return (self.slope - self.predicted) / self.slope_se

    @property
    def ratios(self) -> np.ndarray:
        """Successive ``y[k] / y[k+1]`` with ``x`` sorted decreasingly."""
        order = np.argsort(-self.x)
        y = self.y[order]
        return y[:-1] / y[1:]


def fit_power_law(x, y, sigma=None) -> tuple[float, float, np.ndarray]:
    """Weighted least squares of ``log y = b + s log x``; ``sigma`` is the error of ``log y``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    w = np.ones_like(lx) if sigma is None else 1.0 / np.asarray(sigma, float) ** 2
    X = np.stack([np.ones_like(lx), lx], axis=1)
    WX = X * w[:, None]
    cov = np.linalg.inv(X.T @ WX)
    b, s = cov @ (WX.T @ ly)
    return float(s), float(b), cov


_STATISTICS = {
    "mean": lambda r: r.mean(axis=-1),
    "variance": lambda r: r.var(axis=-1, ddof=1),
}


def _statistic(name):
    if callable(name):
        return name
    try:
        return _STATISTICS[name]
    except KeyError:
        raise ConfigError(f"unknown statistic {name!r}") from None


def _predicted_exponent(predicted) -> float | None:
    if predicted is None:
        return None
    if isinstance(predicted, RateModel):
        return predicted.exponent()
    return float(predicted)


def scaling_fit(eps, groups=None, statistic="variance", predicted=None, values=None,
                errors=None) -> ScalingFit:
    """Log-log fit of a statistic across ``eps`` values.

    ``groups[k]`` holds the per-seed samples at ``eps[k]`` (1-D, or 2-D with
    seeds on the first axis for statistics of several columns). The slope
    error is a grouped jackknife: each group is refit with one seed deleted
    and the contributions are summed over groups. Exact data can be passed
    through ``values`` (with optional ``errors`` on the values) instead.
    """
    x = np.asarray(eps, float)
    if len(x) < 3:
        raise InsufficientSamplesError("scaling fits need at least 3 eps values")
    stat = _statistic(statistic)
    if values is not None:
        y = np.asarray(values, float)
        y_se = np.zeros_like(y) if errors is None else np.asarray(errors, float)
        loo = None
    else:
        if groups is None or len(groups) != len(x):
            raise ConfigError("one sample group per eps value is required")
        clean = []
        for g in groups:
            g = np.asarray(g, float)
            g = g[np.all(np.isfinite(g.reshape(len(g), -1)), axis=1)]
            clean.append(g)
        y = np.array([float(stat(_rows(g)[None])[0]) for g in clean])
        loo = [stat(_loo_rows(g)) for g in clean]
        y_se = np.array([np.sqrt((len(t) - 1) / len(t) * np.sum((t - t.mean()) ** 2)) for t in loo])
    if np.any(~(y > 0)):
        raise ValueError(f"scaling fits need positive statistics, got {y}")
    lsig = y_se / y
    weighted = np.all(lsig > 0)
    slope, icpt, _ = fit_power_law(x, y, lsig if weighted else None)
    if loo is not None:
        var = 0.0
        for k, t in enumerate(loo):
            sl = []
            for v in t:
                yy = y.copy()
                yy[k] = v
                if not v > 0:
                    continue
                sl.append(fit_power_law(x, yy, lsig if weighted else None)[0])
            sl = np.asarray(sl)
            m = len(t)
            var += (m - 1) / m * np.sum((sl - sl.mean()) ** 2)
        slope_se = float(np.sqrt(var))
    else:
        slope_se = float(np.sqrt(fit_power_law(x, y, lsig)[2][1, 1])) if weighted else 0.0
    resid = np.log(y) - (icpt + slope * np.log(x))
    z = resid / lsig if weighted else np.zeros_like(resid)
    order = np.argsort(x)
    dy = np.diff(y[order])
    monotone = bool(np.all(dy > 0) or np.all(dy < 0))
    return ScalingFit(slope, icpt, slope_se, x, y, y_se, z, monotone,
                      _predicted_exponent(predicted))


def _rows(g: np.ndarray) -> np.ndarray:
    return g.T if g.ndim == 2 else g


def _loo_rows(g: np.ndarray) -> np.ndarray:
    n = len(g)
    idx = np.array([np.delete(np.arange(n), i) for i in range(n)])
    sub = g[idx]  # (n, n-1, ...) leave-one-out samples
    return np.moveaxis(sub, 1, -1) if g.ndim == 2 else sub


# ---------------------------------------------------------------- normality

@dataclass
class NormalityMetrics:
    count: int
    ks: float
    ks_pvalue: float
    w2: float
    skewness: float
    excess_kurtosis: float
    total_variation: str = "not-applicable"

    def null_bands(self, width: float = 4.0) -> dict:
        """``width`` standard errors of each statistic under a Gaussian null of this size."""
        n = self.count
        se_skew = math.sqrt(6.0 * (n - 2) / ((n + 1) * (n + 3)))
        se_kurt = 2 * se_skew * math.sqrt((n * n - 1) / ((n - 3) * (n + 5)))
        return {"skewness": width * se_skew, "excess_kurtosis": width * se_kurt}


def standardize(values) -> np.ndarray:
    x = _clean(values)
    sd = np.std(x, ddof=1) if len(x) > 1 else 0.0
    if not sd > 0:
        raise ValueError("degenerate variance: samples are constant")
    return (x - x.mean()) / sd


def normal_quantiles(n: int) -> np.ndarray:
    """Standard normal quantiles at plotting positions ``(k - 1/2) / n``."""
    return stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)


def normality_metrics(values, min_samples: int = 100) -> NormalityMetrics:
    """Distance of the standardized sample to the standard normal law."""
    x = _clean(values)
    if len(x) < min_samples:
        raise InsufficientSamplesError(f"{len(x)} samples; normality metrics need {min_samples}")
    z = standardize(x)
    ks = stats.kstest(z, "norm")
    w2 = float(np.sqrt(np.mean((z - normal_quantiles(len(z))) ** 2)))
    return NormalityMetrics(len(z), float(ks.statistic), float(ks.pvalue), w2,
                            float(stats.skew(z, bias=False)),
                            float(stats.kurtosis(z, fisher=True, bias=False)))


# ---------------------------------------------------------------- covariance structure

def _q_unknowns(d: int) -> list:
    """Free entries ``((i, k), (j, l))`` with ``i <= k`` and ``j <= l``.

    The feature ``(g_i d_j w)(g_k d_l w)`` is symmetric under ``i <-> k`` and
    under ``j <-> l`` separately, so only the part of ``Q`` with both
    symmetries is identifiable: ``(d (d + 1) / 2)^2`` unknowns.
    """
    sym = [(i, k) for i in range(d) for k in range(i, d)]
    return [(a, b) for a in sym for b in sym]


def _orbit(ik, jl) -> set:
    (i, k), (j, l) = ik, jl
    return {(p, q, r, s) for (p, r) in {(i, k), (k, i)} for (q, s) in {(j, l), (l, j)}}


def probe_features(probes, grid: TorusGrid) -> np.ndarray:
    """``T[p, i, j, k, l] = int g_i d_j w g_k d_l w`` for every probe ``(g, w)``.

    Every factor is evaluated at cell centres (``g`` and ``grad w`` are
    smooth), so ``T`` carries the identifiable symmetries exactly.
    """
    d = grid.d
    out = []
    for g, w in probes:
        gc = g.cell_values(grid).reshape(d, -1)
        dw = np.stack([w.deriv((j,), grid) for j in range(d)]).reshape(d, -1)
        out.append(np.einsum("ix,jx,kx,lx->ijkl", gc, dw, gc, dw) * grid.macro_volume)
    return np.array(out)


@dataclass
class QEstimate:
    """Leading covariance 4-tensor ``Q[i, j, k, l]`` of the rescaled standard commutator.

    The predicted variance of probe ``(g, w)`` is ``sum Q_ijkl int g_i d_j w g_k d_l w``.
    ``Q`` is stored symmetrised under ``i <-> k`` and under ``j <-> l``,
    which includes the swap of the two probe slots.
    """

    Q: np.ndarray
    fit_residual: float
    condition_number: float
    train_variances: np.ndarray
    train_se: np.ndarray
    heldout: list = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.einsum("...ijkl,ijkl->...", features, self.Q)


def _design(features: np.ndarray, d: int) -> np.ndarray:
    cols = []
    for ik, jl in _q_unknowns(d):
        cols.append(sum(features[(slice(None),) + (p, q, r, s)] for p, q, r, s in _orbit(ik, jl)))
    return np.stack(cols, axis=1)


def _variance_se(col: np.ndarray) -> float:
    return jackknife_se(np.sort(col), lambda r: r.var(axis=1, ddof=1))


def estimate_Q_leading(train_probes, train_values, grid: TorusGrid, heldout_probes=(),
                       heldout_values=(), max_condition: float = 1e6) -> QEstimate:
    """Least-squares fit of probe variances against the quadratic ansatz in ``g (x) grad w``.

    ``train_values`` has shape ``(seeds, probes)`` and holds the unrescaled
    observables ``<g, Xi°^1[grad w]>``; variances are rescaled by
    ``eps^-d``. Rows are weighted by the jackknife error of each variance
    and the fit residual is the root-mean-square absolute misfit. Each
    held-out entry reports predicted and observed variance, the observed
    error and the allowed band ``3 (stderr + fit residual)``.
    """
    d = grid.d
    scale = grid.eps ** (-d)
    Y = np.asarray(train_values, float)
    Y = Y[np.all(np.isfinite(Y), axis=1)]
    unknowns = _q_unknowns(d)
    X = _design(probe_features(train_probes, grid), d)
    if X.shape[0] <= X.shape[1]:
        raise InsufficientSamplesError(
            f"{X.shape[0]} probes for {X.shape[1]} unknowns; need more probes than unknowns")
    cond = float(np.linalg.cond(X))
    if not cond < max_condition:
        raise np.linalg.LinAlgError(f"probe design is ill-conditioned (condition {cond:.3e})")
    var = scale * Y.var(axis=0, ddof=1)
    se = np.array([scale * _variance_se(Y[:, p]) for p in range(Y.shape[1])])
    if np.all(var == 0):
        coef = np.zeros(X.shape[1])
        resid = 0.0
    else:
        floor = np.max(se[se > 0]) if np.any(se > 0) else 1.0
        w = 1.0 / np.where(se > 0, se, floor)
        coef, *_ = np.linalg.lstsq(X * w[:, None], var * w, rcond=None)
        resid = float(np.sqrt(np.mean((X @ coef - var) ** 2)))
    Q = np.zeros((d,) * 4)
    for c, (ik, jl) in zip(coef, unknowns):
        for idx in _orbit(ik, jl):
            Q[idx] = c
    est = QEstimate(Q, resid, cond, var, se)
    if len(heldout_probes):
        H = np.asarray(heldout_values, float)
        H = H[np.all(np.isfinite(H), axis=1)]
        pred = est.predict(probe_features(heldout_probes, grid))
        for p in range(H.shape[1]):
            v = scale * H[:, p].var(ddof=1)
            s = scale * _variance_se(H[:, p])
            band = 3.0 * (s + resid)
            est.heldout.append({"predicted": float(pred[p]), "observed": float(v), "stderr": float(s),
                                "band": float(band), "ok": bool(abs(pred[p] - v) <= band)})
    return est


# ---------------------------------------------------------------- Malliavin derivative

@dataclass
class MalliavinCheck:
    site: tuple
    channel: int
    delta: float
    scheme: str
    gap: float
    bound_constant: float | None
    support_exact: bool

    @property
    def bound(self) -> float | None:
        """A priori bound ``C delta`` on the forward-difference gap."""
        return None if self.bound_constant is None else self.bound_constant * self.delta


def malliavin_fd_check(config: EnsembleConfig, seed: int, site, channel: int = 0,
                       delta: float = 1e-4, scheme: str = "central") -> MalliavinCheck:
    """Finite-difference derivative of ``a`` in the noise at one cell against the chain rule.

    Perturbs ``xi(site)`` in ``channel`` by ``delta``, rebuilds the field by
    direct summation and compares ``(a_pert - a) / delta`` with
    ``a0'(G(x)) c0(x - site) h^d`` at every cell. The gap is the largest
    entry difference relative to the largest predicted entry. Outside the
    kernel support both sides must vanish exactly. For the forward scheme
    ``bound_constant`` is the Taylor remainder constant
    ``max|a0''| max(c0 h^d)^2 / (2 max|prediction|)``, so the gap should
    stay below ``bound_constant * delta``.
    """
    if not (1e-6 <= delta <= 1e-2):
        raise ConfigError(f"step must lie in [1e-6, 1e-2], got {delta}")
    if scheme not in ("forward", "central"):
        raise ConfigError(f"unknown difference scheme {scheme!r}")
    grid, kern, spec = config.grid, config.kernel(), config.coefficient
    site = tuple(int(s) for s in site)
    if len(site) != grid.d or any(not 0 <= s < grid.N for s in site):
        raise ConfigError(f"site {site} lies outside the grid {grid.shape}")
    if not 0 <= channel < config.kappa:
        raise ConfigError(f"channel {channel} out of range")
    d, h = grid.d, grid.h
    base = sample_white_noise(grid, config.kappa, seed)

    def coef_for(step):
        vals = base.values.copy()
        vals[(channel,) + site] += step
        G = build_gaussian_field(WhiteNoiseSample(grid, config.kappa, vals, seed), kern, "direct")
        return spec(G.values, d), G.values

    a0, G = coef_for(0.0)
    ap, _ = coef_for(delta)
    if scheme == "forward":
        fd = (ap - a0) / delta
    else:
        am, _ = coef_for(-delta)
        fd = (ap - am) / (2 * delta)
    # c0(x - site) h^d for every cell and output channel
    emb = kern.embed(grid.shape)[:, channel]
    dG = np.roll(emb, site, axis=tuple(range(1, 1 + d))) * h**d
    pred = np.einsum("c...,cij...->ij...", dG, spec.derivative(G, d, 1))
    ref = float(np.abs(pred).max())
    gap = float(np.abs(fd - pred).max() / ref) if ref > 0 else float(np.abs(fd).max())
    outside = ~np.any(dG != 0, axis=0)
    support_exact = bool(np.all(fd[..., outside] == 0.0) and np.all(pred[..., outside] == 0.0))
    C = None
    if scheme == "forward" and ref > 0:
        a2 = float(np.abs(spec.derivative(G, d, 2)).max())
        C = 0.5 * a2 * float(np.abs(dG).max()) ** 2 / ref
    return MalliavinCheck(site, channel, delta, scheme, gap, C, support_exact)


# ---------------------------------------------------------------- Poincare inequality

def linear_functional_variance(zeta: np.ndarray, config: EnsembleConfig) -> float:
    """Exact variance of ``X = h^d sum_x zeta(x) . G(x)`` from the covariance kernel.

    ``zeta`` has shape ``(kappa,) + grid``.
    """
    grid = config.grid
    d, h = grid.d, grid.h
    cov = covariance_kernel(config.kernel()).embed(grid.shape)
    axes = tuple(range(2, 2 + d))
    zh = np.fft.fftn(zeta, axes=tuple(range(1, 1 + d)))
    ch = np.fft.fftn(cov, axes=axes)
    conv = np.fft.ifftn(np.einsum("ab...,b...->a...", ch, zh), axes=tuple(range(1, 1 + d))).real
    return float(np.sum(zeta * conv) * h ** (2 * d))


@dataclass
class PoincareResult:
    ratio: float
    variance: float
    variance_se: float
    energy: float
    energy_se: float
    seeds: int
    sites_per_seed: int
    flags: list = field(default_factory=list)

    @property
    def ratio_se(self) -> float:
        if not (self.variance > 0 and self.energy > 0):
            return 0.0
        return self.ratio * math.hypot(self.variance_se / self.variance, self.energy_se / self.energy)


def _sites(grid: TorusGrid, block: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """One uniformly drawn cell per ``block^d`` block; weight is the block volume."""
    if block <= 1:
        idx = np.stack(np.meshgrid(*[np.arange(grid.N)] * grid.d, indexing="ij"), -1)
        return idx.reshape(-1, grid.d), 1.0
    if grid.N % block:
        raise ConfigError(f"block {block} does not divide N = {grid.N}")
    nb = grid.N // block
    corners = np.stack(np.meshgrid(*[np.arange(nb) * block] * grid.d, indexing="ij"), -1)
    corners = corners.reshape(-1, grid.d)
    return corners + rng.integers(0, block, size=corners.shape), float(block**grid.d)


def poincare_check(config: EnsembleConfig, functional: Callable[[WhiteNoiseSample], float],
                   seeds: Sequence[int], block: int = 4, delta: float = 1e-4,
                   variance: float | None = None, variance_seeds: Sequence[int] | None = None,
                   slack: float = 0.2) -> PoincareResult:
    """Ratio ``Var X / E sum_z (dX / dZ_z)^2`` for ``X = functional(noise)``.

    ``Z = h^(d/2) xi`` are the independent standard normal cell variables, so
    the sum is the squared norm of the derivative of ``X`` in the noise. The
    derivative is a central difference at a stratified site sample
    (one random cell per ``block^d`` block, reweighted by the block volume).
    ``variance`` overrides the Monte Carlo variance (use the exact value for
    linear functionals); ``variance_seeds`` estimates it on a separate list.
    """
    grid = config.grid
    d = grid.d
    step = delta * grid.h ** (-d / 2)
    seeds = sorted(int(s) for s in seeds)
    energies, xs = [], []
    nsites = 0
    for s in seeds:
        noise = sample_white_noise(grid, config.kappa, s)
        xs.append(functional(noise))
        rng = np.random.default_rng([s, 7919])
        sites, weight = _sites(grid, block, rng)
        nsites = len(sites)
        e = 0.0
        for z in sites:
            for c in range(config.kappa):
                vals = noise.values.copy()
                vals[(c,) + tuple(z)] += step
                xp = functional(WhiteNoiseSample(grid, config.kappa, vals, s))
                vals[(c,) + tuple(z)] -= 2 * step
                xm = functional(WhiteNoiseSample(grid, config.kappa, vals, s))
                e += weight * ((xp - xm) / (2 * delta)) ** 2
        energies.append(e)
    energies = np.array(energies)
    flags = []
    if nsites < 16:
        flags.append("few-sites")
    if variance is not None:
        var, var_se = float(variance), 0.0
    else:
        if variance_seeds is not None:
            xs = [functional(sample_white_noise(grid, config.kappa, int(s))) for s in variance_seeds]
        xs = np.sort(np.asarray(xs, float))
        var = float(np.var(xs, ddof=1))
        # leave-one-out variances need at least two values each
        var_se = jackknife_se(xs, lambda r: r.var(axis=1, ddof=1)) if len(xs) >= 3 else math.nan
    en = float(energies.mean())
    en_se = float(energies.std(ddof=1) / np.sqrt(len(energies))) if len(energies) > 1 else 0.0
    if en == 0.0:
        flags.append("degenerate")
        ratio = 0.0 if var == 0.0 else math.inf
    else:
        ratio = var / en
    if ratio > 1.0 + slack:
        flags.append("ratio-above-slack")
    return PoincareResult(ratio, var, var_se, en, en_se, len(seeds), nsites, flags)


def observable_functional(config: EnsembleConfig, spec: ObservableSpec,
                          calibration: Calibration | None = None, tol: float | None = None):
    """``noise -> value`` for one observable (used by :func:`poincare_check`)."""
    tol = config.tol if tol is None else tol

    def fun(noise: WhiteNoiseSample) -> float:
        coef = sample_field_coefficient(config, 0, noise)
        cache = {"order": spec.hierarchy_order}
        return float(_value(spec, coef, cache, calibration, tol))

    return fun
