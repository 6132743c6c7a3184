"""Corrector hierarchy: correctors, fluxes, skew flux correctors and effective tensors.

Storage: ``phi[n]`` has shape ``(d,) * n + grid``; ``q[n]`` has shape
``(d,) * n + (d,) + grid``; ``sigma[n]`` has shape ``(d,) * n + (npairs,) + grid``.
The effective tensor of order ``n`` is stored as an array ``E`` of shape
``(d,) * (n - 1) + (d, d)`` with ``E[I][i, k] = e_i . abar^n_I e_k``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations, product

import numpy as np

from . import calculus as dc
from .gaussian_field import CoefficientField, TorusGrid

log = logging.getLogger(__name__)

__all__ = [
    "HierarchyError",
    "HomogenizedTensor",
    "CorrectorSet",
    "stationary_order",
    "corrector_level",
    "build_hierarchy",
    "ensemble_tensors",
    "symmetry_identity_residual",
    "even_order_symmetric_part",
    "sym",
    "CorrectorGrowth",
    "corrector_growth_stats",
]


class HierarchyError(RuntimeError):
    """A level of the hierarchy could not be built; names the failing multi-index."""


def stationary_order(d: int) -> int:
    """Highest order with stationary correctors in the whole space: ``ceil(d / 2)``."""
    return math.ceil(d / 2)


@dataclass
class HomogenizedTensor:
    """Effective tensor of one order with its provenance."""

    order: int
    entries: np.ndarray
    provenance: str = "per-sample"
    count: int = 1
    stderr: np.ndarray | None = None

    def matrix(self, index: tuple[int, ...] = ()) -> np.ndarray:
        """``d x d`` matrix ``abar^n_I`` (columns ``abar^n_I e_k``)."""
        return self.entries[tuple(index)]

    def to_dict(self) -> dict:
        out = {"order": self.order, "entries": self.entries.tolist(),
               "provenance": self.provenance, "count": self.count}
        if self.stderr is not None:
            out["stderr"] = self.stderr.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HomogenizedTensor":
        se = data.get("stderr")
        return cls(int(data["order"]), np.asarray(data["entries"], float),
                   data.get("provenance", "ensemble"), int(data.get("count", 1)),
                   None if se is None else np.asarray(se, float))


@dataclass
class CorrectorSet:
    grid: TorusGrid
    n_max: int
    phi: list
    sigma: list
    q: list
    abar: list
    dual: bool = False
    reports: dict = field(default_factory=dict, repr=False)
    residuals: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def beyond_stationary(self) -> list[bool]:
        ell = stationary_order(self.d)
        return [n > ell for n in range(self.n_max + 1)]

    def tensors(self) -> list:
        return self.abar

    def flux_with_sigma_column(self, n: int, I: tuple, k: int) -> np.ndarray:
        """Edge field ``sigma^n_I e_k`` (component ``i`` is ``sigma_ik`` averaged onto edge ``i``)."""
        return sigma_column(self.sigma[n][tuple(I)], k, self.d)


def sigma_column(sig: np.ndarray, k: int, d: int) -> np.ndarray:
    """Edge field with components ``sigma_ik`` averaged over the plaquettes at ``x`` and ``x - e_k``."""
    out = np.zeros((d,) + sig.shape[1:])
    for i in range(d):
        if i == k:
            continue
        s = dc.skew_component(sig, i, k, d)
        out[i] = 0.5 * (s + dc.shift(s, k, -1, d))
    return out


def phi_column(a: np.ndarray, phi: np.ndarray | float, k: int, d: int) -> np.ndarray:
    """Edge field ``P^T(a phi e_k)``; for ``phi = 1`` this is the flux of the constant field ``e_k``."""
    W = a[:, k] * phi
    return dc.cell_to_edge(W, d)


def corrector_level(coef: CoefficientField, prev_phi: np.ndarray, prev_sigma: np.ndarray,
                    n: int, tol: float = 1e-10):
    """One level of the hierarchy for all multi-indices of length ``n``.

    Returns ``(phi, q, sigma, abar_entries, reports, residuals)``.
    """
    if n < 1:
        raise ValueError("levels start at n = 1")
    grid, d = coef.grid, coef.d
    h = grid.h
    A = coef.operator
    shape = grid.shape
    npairs = len(dc.pairs(d))
    phi = np.zeros((d,) * n + shape)
    q = np.zeros((d,) * n + (d,) + shape)
    sigma = np.zeros((d,) * n + (npairs,) + shape)
    abar = np.zeros((d,) * (n - 1) + (d, d))
    reports = {}
    eq_res = 0.0
    drive2 = 0.0
    for I in product(range(d), repeat=n - 1):
        p_prev = prev_phi[I] if n > 1 else 1.0
        s_prev = prev_sigma[I] if n > 1 else None
        for k in range(d):
            rhs = phi_column(coef.a, p_prev, k, d)
            if s_prev is not None:
                rhs = rhs - sigma_column(s_prev, k, d)
            drive2 += float(np.sum(rhs * rhs))
            try:
                u, rep = dc.solve_divform(A, rhs, h, tol)
            except dc.SolverError as exc:
                raise HierarchyError(f"level {n}, multi-index {I + (k,)}: {exc}") from exc
            total = A(dc.grad(u, h, d)) + rhs
            col = total.reshape(d, -1).mean(axis=1)
            idx = I + (k,)
            phi[idx] = u
            q[idx] = total - col.reshape((d,) + (1,) * d)
            abar[I][:, k] = col
            reports[idx] = rep
            eq_res = max(eq_res, rep.residual)
    # flux correctors: sigma_ij = (-Lap)^-1 (curl q)_ij
    curl = dc.curl_pair(q, h, d)
    cmean = np.abs(curl.reshape(curl.shape[: -d] + (-1,)).mean(axis=-1)).max() if npairs else 0.0
    cscale = max(float(np.abs(curl).max()) if npairs else 0.0, 1e-300)
    if cmean > 1e-12 * max(cscale, 1.0):
        raise HierarchyError(f"level {n}: curl of flux has nonzero mean {cmean:.3e}")
    if npairs:
        sigma = dc.solve_poisson(curl, h, d, check_mean=False)
    # a vanishing flux (constant medium) is compared at roundoff of the driving flux
    floor = 1e-12 * np.sqrt(drive2)
    residuals = {
        "equation": eq_res,
        "mean_q": float(np.abs(q.reshape(q.shape[: -d] + (-1,)).mean(axis=-1)).max()),
        "div_q": _rel(dc.div(q, h, d), q, h, floor),
        "div_sigma_minus_q": _rel(dc.div_skew(sigma, h, d) - q, q, 1.0, floor) if npairs else 0.0,
        "mean_phi": float(np.abs(phi.reshape(phi.shape[: -d] + (-1,)).mean(axis=-1)).max()),
    }
    return phi, q, sigma, abar, reports, residuals


def _rel(x: np.ndarray, ref: np.ndarray, scale: float = 1.0, floor: float = 0.0) -> float:
    nr = max(float(np.linalg.norm(ref)), floor)
    nx = float(np.linalg.norm(x))
    if nr == 0.0:
        return nx
    return nx / (nr / scale)


def build_hierarchy(coef: CoefficientField, n_max: int, tol: float = 1e-10) -> CorrectorSet:
    """Correctors of orders ``0..n_max`` for ``coef`` (use ``coef.transpose()`` for the dual)."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    grid, d = coef.grid, coef.d
    ell = stationary_order(d)
    if n_max > ell:
        log.info("orders above %d carry no stationary-theory prediction", ell)
    npairs = len(dc.pairs(d))
    phi = [np.ones(grid.shape)]
    sigma = [np.zeros((npairs,) + grid.shape)]
    q = [None]
    abar = [None]
    reports, residuals = {}, {}
    for n in range(1, n_max + 1):
        p, qq, s, ab, rep, res = corrector_level(coef, phi[n - 1], sigma[n - 1], n, tol)
        phi.append(p)
        q.append(qq)
        sigma.append(s)
        abar.append(HomogenizedTensor(n, ab))
        reports[n] = rep
        residuals[n] = res
    if abar[1] is not None:
        M = abar[1].entries
        lo = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
        residuals["abar1_min_sym_eig"] = lo
        if lo < coef.lam - 1e-10:
            log.warning("effective matrix below ellipticity floor: %.3e < %.3e", lo, coef.lam)
    return CorrectorSet(grid, n_max, phi, sigma, q, abar, coef.adjoint, reports, residuals, coef.seed)


def ensemble_tensors(sets: list, provenance: str = "ensemble") -> list:
    """Average per-sample tensors over an ensemble; ``[None, abar1, abar2, ...]`` with stderr."""
    if not sets:
        raise ValueError("empty ensemble")
    n_max = min(cs.n_max if isinstance(cs, CorrectorSet) else len(cs) - 1 for cs in sets)
    out = [None]
    for n in range(1, n_max + 1):
        stack = np.stack([(cs.abar[n] if isinstance(cs, CorrectorSet) else cs[n]).entries
                          for cs in sets])
        m = stack.mean(axis=0)
        se = stack.std(axis=0, ddof=1) / np.sqrt(len(sets)) if len(sets) > 1 else np.zeros_like(m)
        out.append(HomogenizedTensor(n, m, provenance, len(sets), se))
    return out


# ---------------------------------------------------------------- symmetry identities

def sym(T: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Average of ``T`` over all permutations of the given axes."""
    perms = list(permutations(axes))
    acc = np.zeros_like(T, dtype=float)
    base = list(range(T.ndim))
    for p in perms:
        order = base.copy()
        for src, dst in zip(axes, p):
            order[src] = dst
        acc += np.transpose(T, order)
    return acc / len(perms)


def _as_entries(t) -> np.ndarray:
    return t.entries if isinstance(t, HomogenizedTensor) else np.asarray(t)


def migration_tensors(primal, dual, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the order-``n`` symmetry relation as arrays over ``(j, i_1, ..., i_n)``.

    ``left[j, I] = Sym_I(e_j . abar^n_{i_1..i_{n-1}} e_{i_n})`` and
    ``right[j, I] = (-1)^{n+1} Sym_I(e_{i_n} . abar*^n_{j i_1..i_{n-2}} e_{i_{n-1}})``.
    """
    A = _as_entries(primal[n])
    B = _as_entries(dual[n])
    if n == 1:
        left = A  # left[j, i1] = e_j . abar e_{i1}
        right = B.T  # e_{i1} . abar* e_j
        return left, right
    # A has axes (i1..i_{n-1}, row, col); move row (=j) first: (j, i1..i_{n-1}, i_n)
    left = np.moveaxis(A, n - 1, 0)
    # B has axes (j, i1..i_{n-2}, row=i_n, col=i_{n-1}); want (j, i1..i_{n-2}, i_{n-1}, i_n)
    right = np.swapaxes(B, -1, -2)
    axes = tuple(range(1, n + 1))
    return sym(left, axes), (-1) ** (n + 1) * sym(right, axes)


def symmetry_identity_residual(primal, dual, n: int) -> float:
    """Max over free indices of the gap in the order-``n`` primal/dual symmetry relation.

    ``primal`` and ``dual`` are corrector sets (or tensor lists) for ``a`` and ``a^T``.
    """
    pt = primal.abar if isinstance(primal, CorrectorSet) else primal
    dt = dual.abar if isinstance(dual, CorrectorSet) else dual
    if len(pt) <= n or len(dt) <= n or pt[n] is None or dt[n] is None:
        raise HierarchyError(f"order {n} missing from one of the hierarchies")
    left, right = migration_tensors(pt, dt, n)
    return float(np.max(np.abs(left - right)))


def even_order_symmetric_part(tensors, n: int) -> float:
    """Max of the fully symmetrised ``e_{i_{n+1}} . abar^n_{i_1..i_{n-1}} e_{i_n}``."""
    A = _as_entries(tensors[n])
    T = np.moveaxis(A, n - 1, -1)  # (i1..i_{n-1}, i_n, i_{n+1})
    return float(np.max(np.abs(sym(T, tuple(range(n + 1))))))


# ---------------------------------------------------------------- corrector growth

@dataclass
class CorrectorGrowth:
    """Ensemble statistics of ``phi^n_I`` across domain sizes ``L = 1 / eps``.

    ``grad_moment[k]`` is ``E <|grad phi^n_I|^2>`` (microscopic gradient,
    spatial average) and ``average_variance[k]`` is ``Var int g phi^n_I(./eps)``
    on the unit torus. ``slope`` fits ``log average_variance`` against
    ``log eps`` (prediction ``d - 2n``). For even ``d`` and ``n = ceil(d/2)``,
    ``log_coefficient`` is ``beta`` in ``Var = alpha + beta log(1/eps)`` and
    ``variogram`` maps the lag ``r`` (microscopic units) to
    ``E (phi(x + r e_1) - phi(x))^2`` on the largest domain, with
    ``variogram_log_slope`` its slope against ``log r``.
    """

    n: int
    index: tuple
    eps: np.ndarray
    seeds: np.ndarray
    grad_moment: np.ndarray
    grad_moment_se: np.ndarray
    average_variance: np.ndarray
    average_variance_se: np.ndarray
    predicted_slope: float
    slope: float = math.nan
    slope_se: float = math.nan
    log_coefficient: float | None = None
    log_coefficient_se: float | None = None
    variogram: dict = field(default_factory=dict)
    variogram_log_slope: float | None = None
    degenerate: bool = False

    def grad_moment_spread(self) -> float:
        """Largest pairwise gap of the gradient moments in units of their combined error."""
        m, s = self.grad_moment, self.grad_moment_se
        worst = 0.0
        for i in range(len(m)):
            for j in range(i + 1, len(m)):
                den = math.hypot(s[i], s[j])
                gap = abs(m[i] - m[j])
                worst = max(worst, gap / den if den > 0 else (math.inf if gap > 0 else 0.0))
        return worst


def _default_weight(grid: TorusGrid) -> np.ndarray:
    return sum(np.cos(2 * np.pi * x) for x in grid.macro_coords())


def _wls_line(x, y, se):
    """Weighted straight-line fit ``y = b + s x``; returns ``(s, b, se(s))``."""
    x, y, se = (np.asarray(v, float) for v in (x, y, se))
    w = 1.0 / se**2 if np.all(se > 0) else np.ones_like(x)
    X = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    b, s = cov @ (X.T @ (w * y))
    return float(s), float(b), float(np.sqrt(cov[1, 1])) if np.all(se > 0) else math.nan


def corrector_growth_stats(ensembles, n: int, index: tuple | None = None, weight=None,
                           min_seeds: int = 50) -> CorrectorGrowth:
    """Growth and fluctuation statistics of ``phi^n`` over an ensemble per domain size.

    ``ensembles`` maps ``eps`` to a list of corrector sets built on grids with
    the same ``h`` and ``L = 1 / eps``. ``weight(grid)`` is a zero-mean
    macroscopic test function (default ``sum_i cos(2 pi x_i)``).
    """
    if not ensembles:
        raise ValueError("no ensembles given")
    eps = np.array(sorted(ensembles, reverse=True), float)
    first = ensembles[eps[0]][0]
    d = first.d
    ell = stationary_order(d)
    if not 1 <= n <= ell:
        raise ValueError(f"growth statistics need 1 <= n <= {ell}, got {n}")
    index = (0,) * n if index is None else tuple(index)
    weight = _default_weight if weight is None else weight
    gm, gse, av, ase, counts = [], [], [], [], []
    for e in eps:
        sets = ensembles[e]
        if len(sets) < min_seeds:
            raise ValueError(f"eps={e}: {len(sets)} seeds, need at least {min_seeds}")
        grid = sets[0].grid
        W = weight(grid)
        g2, avg = [], []
        for cs in sets:
            phi = cs.phi[n][index]
            g2.append(float(np.mean(np.sum(dc.grad(phi, grid.h, d) ** 2, axis=0))))
            avg.append(float(np.sum(W * phi) * grid.macro_volume))
        g2, avg = np.array(g2), np.array(avg)
        m = len(sets)
        gm.append(g2.mean())
        gse.append(g2.std(ddof=1) / math.sqrt(m))
        v = avg.var(ddof=1)
        av.append(v)
        # normal-theory error of a sample variance
        ase.append(v * math.sqrt(2.0 / (m - 1)))
        counts.append(m)
    out = CorrectorGrowth(n, index, eps, np.array(counts), np.array(gm), np.array(gse),
                          np.array(av), np.array(ase), float(d - 2 * n))
    if not np.all(out.average_variance > 0):
        out.degenerate = True
        return out
    lsig = out.average_variance_se / out.average_variance
    out.slope, _, out.slope_se = _wls_line(np.log(eps), np.log(out.average_variance), lsig)
    if d % 2 == 0 and n == ell:
        out.log_coefficient, _, out.log_coefficient_se = _wls_line(
            np.log(1.0 / eps), out.average_variance, out.average_variance_se)
        sets = ensembles[eps[-1]]
        grid = sets[0].grid
        lags = [r for r in range(1, grid.N // 4 + 1)]
        vg = []
        for r in lags:
            acc = [np.mean((np.roll(cs.phi[n][index], -r, axis=0) - cs.phi[n][index]) ** 2)
                   for cs in sets]
            vg.append(float(np.mean(acc)))
        out.variogram = {r * grid.h: v for r, v in zip(lags, vg)}
        out.variogram_log_slope, _, _ = _wls_line(np.log(np.array(lags) * grid.h), vg,
                                                  np.ones(len(lags)))
    return out
