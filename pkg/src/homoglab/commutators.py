"""Homogenization commutators, the standard commutator and the identities relating them.

All fields are macroscopic edge fields on the unit torus (see :mod:`homoglab.calculus`).

Discrete convention for the standard commutator: a smooth macroscopic factor
multiplying a stationary field is evaluated at the output edge, and lattice
derivatives of such products are distributed by the Leibniz rule with exact
derivatives on the smooth factor. :func:`standard_commutator_explicit` uses
that convention; :func:`standard_commutator_taylor` applies the lattice
operators literally to the expansion of local Taylor polynomials. The two
agree to discretisation order and coincide for ``n = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from math import comb, factorial

import numpy as np

from . import calculus as dc
from .correctors import CorrectorSet, phi_column, sigma_column, sym
from .gaussian_field import CoefficientField
from .two_scale import (HeterogeneousSolution, _edge_offset, _entries, discrete_derivative,
                        edge_values, homogenized_cascade, solve_heterogeneous,
                        stationary_column)

__all__ = [
    "commutator",
    "standard_commutator_explicit",
    "standard_commutator_taylor",
    "hill_mandel_residual",
    "duality_residual",
    "duality_terms",
    "pooled_duality_residual",
    "pooled_reduction_residual",
    "ReductionTerms",
    "reduction_identity_residual",
    "edge_dot",
]


def edge_dot(F: np.ndarray, G: np.ndarray, d: int) -> np.ndarray:
    """Cell field ``sum_c P(F_c G_c)`` (edge products averaged onto cells)."""
    return dc.edge_to_cell(F * G, d).sum(axis=-d - 1)


def _symmetrised(tensors, k: int) -> np.ndarray:
    """Entries of ``abar^k`` averaged over permutations of the multi-index."""
    E = _entries(tensors[k])
    return sym(E, tuple(range(k - 1))) if k > 2 else E


# ---------------------------------------------------------------- commutator

def _effective_flux(tensors, H: np.ndarray, n: int, eps: float, spacing: float, d: int) -> np.ndarray:
    out = np.zeros_like(H)
    for k in range(1, n + 1):
        E = _entries(tensors[k])
        for I in product(range(d), repeat=k - 1):
            op = dc.ConstantFluxOperator(E[I], d)
            out = out + eps ** (k - 1) * op(discrete_derivative(H, I, spacing, d))
    return out


def commutator(coef: CoefficientField, tensors, H: np.ndarray, n: int) -> np.ndarray:
    """``Xi^n[H] = a H - sum_{k<=n} eps^(k-1) abar^k_I D^(k-1)_I H`` (``n = 0`` gives ``a H``)."""
    grid = coef.grid
    if n > 0 and (len(tensors) <= n or any(tensors[k] is None for k in range(1, n + 1))):
        raise ValueError(f"effective tensors up to order {n} are required")
    out = coef.operator(H)
    if n > 0:
        out = out - _effective_flux(tensors, H, n, grid.eps, grid.macro_spacing, grid.d)
    return out


# ---------------------------------------------------------------- standard commutator

def standard_commutator_explicit(coef: CoefficientField, cs: CorrectorSet, w, n: int,
                                 tensors=None) -> np.ndarray:
    """Standard commutator of order ``n`` from the explicit corrector formula.

    ``sum_s eps^s d^{s+1}_J w (a - abar^1) Y^s_J`` minus the higher tensors
    acting on lattice derivatives of ``Y^s_J``, keeping only terms in which
    ``w`` is differentiated at most ``n`` times. ``Y^s_J`` is
    :func:`~homoglab.two_scale.stationary_column`.
    """
    if n < 1 or n > cs.n_max:
        raise ValueError(f"order {n} not available (hierarchy built to {cs.n_max})")
    tensors = cs.abar if tensors is None else tensors
    grid, d, eps, D = cs.grid, cs.d, cs.grid.eps, cs.grid.macro_spacing
    op1 = dc.ConstantFluxOperator(_entries(tensors[1]), d)
    A = coef.operator
    out = np.zeros((d,) + grid.shape)
    for s in range(n):
        for J in product(range(d), repeat=s + 1):
            Y = stationary_column(cs, s, J)
            out += eps**s * edge_values(w, J, grid) * (A(Y) - op1(Y))
            for k in range(1, n):
                S = _symmetrised(tensors, k + 1)
                for l in range(max(0, k + s + 1 - n), k + 1):
                    for I1 in product(range(d), repeat=l):
                        DY = discrete_derivative(Y, I1, D, d)
                        for I2 in product(range(d), repeat=k - l):
                            op = dc.ConstantFluxOperator(S[I1 + I2], d)
                            W = edge_values(w, I2 + J, grid)
                            out -= eps ** (k + s) * comb(k, l) * W * op(DY)
    return out


def _patch_index(N: int, r: int, d: int):
    o = np.arange(-r, r + 1)
    base = np.meshgrid(*([np.arange(N)] * d), indexing="ij")
    idx = []
    for i in range(d):
        b = base[i].reshape((-1,) + (1,) * d)
        so = [1] * (d + 1)
        so[i + 1] = 2 * r + 1
        idx.append((b + o.reshape(so)) % N)
    return tuple(idx)


def _patches(X: np.ndarray, idx, d: int) -> np.ndarray:
    """``(B,) + X.shape[:-d] + (P,) * d`` local windows around every cell."""
    out = X[(Ellipsis,) + idx]
    return np.moveaxis(out, -d - 1, 0)


def _patch_flux(a_p: np.ndarray, F: np.ndarray, d: int) -> np.ndarray:
    """Flux operator applied window by window; ``a_p`` is ``(B, d, d, P...)``."""
    out = np.empty_like(F)
    for i in range(d):
        aii = a_p[:, i, i]
        out[:, i] = 0.5 * (aii + dc.shift(aii, i, 1, d)) * F[:, i]
    off = a_p.copy()
    for i in range(d):
        off[:, i, i] = 0.0
    if np.any(off != 0.0):
        PF = dc.edge_to_cell(F, d)
        W = np.sum(off * PF[:, None], axis=2)
        out = out + dc.cell_to_edge(W, d)
    return out


def standard_commutator_taylor(coef: CoefficientField, cs: CorrectorSet, w, n: int,
                               tensors=None, radius: int | None = None) -> np.ndarray:
    """Standard commutator from its definition with local Taylor polynomials.

    For every output edge the degree-``n`` Taylor polynomial of ``w`` at the
    edge midpoint is expanded with the correctors, the lattice commutator is
    applied on a periodic window of ``2 * radius + 1`` cells and the centre
    value is kept. The window must contain the stencil of the commutator.
    """
    if n < 1 or n > cs.n_max:
        raise ValueError(f"order {n} not available (hierarchy built to {cs.n_max})")
    tensors = cs.abar if tensors is None else tensors
    grid, d, eps, D = cs.grid, cs.d, cs.grid.eps, cs.grid.macro_spacing
    r = n + 1 if radius is None else radius
    if r < n + 1:
        raise ValueError(f"window radius {r} is smaller than the stencil radius {n + 1}")
    idx = _patch_index(grid.N, r, d)
    a_p = _patches(coef.a, idx, d)
    o = np.arange(-r, r + 1)
    Ys = {(s, J): _patches(stationary_column(cs, s, J), idx, d)
          for s in range(n) for J in product(range(d), repeat=s + 1)}
    out = np.zeros((d,) + grid.shape)
    P = 2 * r + 1
    for m in range(d):
        base = _edge_offset(d, m)
        # displacement (in macro units) from basepoint to edge c of each window cell
        disp = []
        for c in range(d):
            dc_ = []
            for i in range(d):
                sh = [1] * d
                sh[i] = P
                shift_ = (o + (0.5 if i == c else 0.0) - base[i]) * D
                dc_.append(shift_.reshape(sh))
            disp.append(dc_)
        Ep = np.zeros((grid.N**d, d) + (P,) * d)
        for (s, J), Yp in Ys.items():
            for c in range(d):
                poly = np.zeros((grid.N**d,) + (P,) * d)
                for rr in range(n - s):
                    for B in product(range(d), repeat=rr):
                        coeff = w.deriv(J + B, grid, base).reshape((-1,) + (1,) * d)
                        mono = np.ones((1,) + (P,) * d)
                        for b in B:
                            mono = mono * disp[c][b]
                        poly = poly + coeff * mono / factorial(rr)
                Ep[:, c] += eps**s * Yp[:, c] * poly
        X = _patch_flux(a_p, Ep, d) - _effective_flux(tensors, Ep, n, eps, D, d)
        out[m] = X[(slice(None), m) + (r,) * d].reshape(grid.shape)
    return out


# ---------------------------------------------------------------- Hill-Mandel relation

def hill_mandel_residual(coef: CoefficientField, cs: CorrectorSet, cs_dual: CorrectorSet,
                         f, n: int, sol: HeterogeneousSolution | None = None,
                         tensors=None, tol: float = 1e-10) -> float:
    """Largest componentwise relative gap in the order-``n`` Hill-Mandel relation.

    The commutator side is averaged onto cells and compared in ``L^2`` with
    the corrector-flux side built from dual correctors of orders up to ``n``.
    ``sol`` solves the heterogeneous problem driven by ``f``. References below
    ``tol`` times the flux norm are floored there.
    """
    if cs_dual.n_max < n or cs.n_max < n:
        raise ValueError(f"hierarchies must reach order {n}")
    grid, d, eps, D, h = cs.grid, cs.d, cs.grid.eps, cs.grid.macro_spacing, cs.grid.h
    tensors = cs.abar if tensors is None else tensors
    if sol is None:
        sol = solve_heterogeneous(coef, f, tol)
    gu = sol.grad
    lhs = dc.edge_to_cell(commutator(coef, tensors, gu, n), d)
    floor = tol * float(np.linalg.norm(dc.edge_to_cell(coef.operator(gu), d)))
    f_edge = f.edge_values(grid)
    f_cell = f.cell_values(grid)
    a_star = np.swapaxes(coef.a, 0, 1)
    worst = 0.0
    for j in range(d):
        rhs = np.zeros(grid.shape)
        for I in product(range(d), repeat=n):
            key = (j,) + I[:-1]
            p = cs_dual.phi[n][key]
            col = phi_column(a_star, p, I[-1], d) - sigma_column(cs_dual.sigma[n][key], I[-1], d)
            X = edge_dot(col, gu, d) + p * f_cell[I[-1]]
            rhs += (-eps) ** n * discrete_derivative(X, I, D, d)
        for k in range(n):
            for I in product(range(d), repeat=k):
                Z = edge_dot(dc.grad(cs_dual.phi[k + 1][(j,) + I], h, d), f_edge, d)
                if k > 0:
                    Z = Z + cs_dual.phi[k][(j,) + I[:-1]] * f_cell[I[-1]]
                rhs += (-eps) ** k * discrete_derivative(Z, I, D, d)
        # floor the reference at solver precision so a vanishing commutator is not divided by roundoff
        ref = max(float(np.linalg.norm(lhs[j])), floor)
        worst = max(worst, float(np.linalg.norm(lhs[j] - rhs)) / ref)
    return worst


# ---------------------------------------------------------------- duality and reduction

def _gradient_of(w, grid) -> np.ndarray:
    if isinstance(w, np.ndarray):
        vals = w if w.shape == grid.shape else None
        if vals is None:
            return w  # already an edge field
    else:
        vals = w(grid)
    return dc.grad(vals, grid.macro_spacing, grid.d)


def duality_terms(coef: CoefficientField, tensors, dual_tensors, w, w2, n: int):
    """``(<grad w2, Xi^n[grad w]>, <Xi*^n[grad w2], grad w>)``."""
    grid = coef.grid
    H, H2 = _gradient_of(w, grid), _gradient_of(w2, grid)
    t1 = dc.inner(H2, commutator(coef, tensors, H, n), grid.macro_volume)
    t2 = dc.inner(commutator(coef.transpose(), dual_tensors, H2, n), H, grid.macro_volume)
    return t1, t2


def duality_residual(coef: CoefficientField, tensors, dual_tensors, w, w2, n: int) -> float:
    """``|<grad w2, Xi^n[grad w]> - <Xi*^n[grad w2], grad w>|`` relative to the first term."""
    t1, t2 = duality_terms(coef, tensors, dual_tensors, w, w2, n)
    return abs(t1 - t2) / abs(t1) if t1 != 0 else abs(t1 - t2)


def pooled_duality_residual(coef: CoefficientField, tensors, dual_tensors, pairs, n: int) -> float:
    """Root-mean-square duality gap over test pairs divided by the RMS first term.

    A single pairing is a signed number that can pass through zero under
    refinement; pooling several pairs gives a norm-like refinement measure.
    """
    gaps, refs = [], []
    for w, w2 in pairs:
        t1, t2 = duality_terms(coef, tensors, dual_tensors, w, w2, n)
        gaps.append(t1 - t2)
        refs.append(t1)
    return _pooled(gaps, refs)


def _pooled(gaps, refs) -> float:
    num = float(np.sqrt(np.mean(np.square(gaps))))
    den = float(np.sqrt(np.mean(np.square(refs))))
    return num / den if den > 0 else num


@dataclass
class ReductionTerms:
    """Terms of ``<g, grad u> - <grad vbar, f> = <grad vbar, Xi[grad u]> + extra``."""

    source: float
    dual_source: float
    commutator: float
    extra: float

    @property
    def gap(self) -> float:
        return self.source - self.dual_source - self.commutator - self.extra

    @property
    def scale(self) -> float:
        return max(abs(self.source), abs(self.dual_source), abs(self.commutator))

    @property
    def relative(self) -> float:
        return abs(self.gap) / self.scale if self.scale > 0 else abs(self.gap)


def reduction_identity_residual(coef: CoefficientField, tensors, dual_tensors, f, g, n: int,
                                sol: HeterogeneousSolution | None = None,
                                tol: float = 1e-10) -> ReductionTerms:
    """Terms of the reduction identity testing ``u_eps`` against the dual cascade of ``g``.

    The relative defect is the gap divided by the largest of the three main terms.
    """
    grid, d, eps, D = coef.grid, coef.d, coef.grid.eps, coef.grid.macro_spacing
    if sol is None:
        sol = solve_heterogeneous(coef, f, tol)
    gu = sol.grad
    casc = homogenized_cascade(dual_tensors, g, n, grid, dual=True)
    gv = dc.grad(casc.assembled(), D, d)
    vol = grid.macro_volume
    ge = g.edge_values(grid) if hasattr(g, "edge_values") else np.asarray(g, float)
    fe = f.edge_values(grid) if hasattr(f, "edge_values") else np.asarray(f, float)
    extra_flux = np.zeros((d,) + grid.shape)
    for k in range(2, n + 1):
        E = _entries(dual_tensors[k])
        for j in range(n + 2 - k, n + 1):
            vj = casc.components[j - 1]
            for I in product(range(d), repeat=k - 1):
                op = dc.ConstantFluxOperator(E[I], d)
                extra_flux += eps ** (k + j - 2) * op(dc.grad(discrete_derivative(vj, I, D, d), D, d))
    return ReductionTerms(
        source=dc.inner(ge, gu, vol),
        dual_source=dc.inner(gv, fe, vol),
        commutator=dc.inner(gv, commutator(coef, tensors, gu, n), vol),
        extra=dc.inner(extra_flux, gu, vol),
    )


def pooled_reduction_residual(coef: CoefficientField, tensors, dual_tensors, sources, n: int,
                              tol: float = 1e-10) -> float:
    """RMS reduction gap over ``(f, g)`` pairs divided by the RMS term scale."""
    gaps, refs = [], []
    for f, g in sources:
        R = reduction_identity_residual(coef, tensors, dual_tensors, f, g, n, tol=tol)
        gaps.append(R.gap)
        refs.append(R.scale)
    return _pooled(gaps, refs)
