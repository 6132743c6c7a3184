"""Two-scale expansions, homogenized cascades and heterogeneous macroscopic solves.

Macroscopic problems live on the unit torus discretised by the same lattice
as the coefficient sample: cell ``k`` sits at ``x = k / N`` and the macroscopic
spacing is ``1 / N = eps * h``. A corrector value ``phi(x / eps)`` at a
macroscopic cell is therefore the corrector array at the same index, and the
macroscopic gradient of ``phi(. / eps)`` is ``eps^-1`` times its microscopic
gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Protocol, Sequence

import numpy as np

from . import calculus as dc
from .correctors import CorrectorSet, HomogenizedTensor
from .gaussian_field import CoefficientField, TorusGrid

__all__ = [
    "SmoothField",
    "TrigPolynomial",
    "VectorTestFunction",
    "SpectralField",
    "random_trig",
    "random_vector_trig",
    "discrete_derivative",
    "two_scale_F",
    "two_scale_E",
    "link_identity_residual",
    "CascadeSolution",
    "homogenized_cascade",
    "HeterogeneousSolution",
    "solve_heterogeneous",
    "expansion_error",
    "intertwining_residual",
    "RateModel",
    "l2_norm",
]

EDGE = "edge"


class SmoothField(Protocol):
    def deriv(self, index: Sequence[int], grid: TorusGrid, offset=None) -> np.ndarray: ...


def _edge_offset(d: int, i: int) -> np.ndarray:
    off = np.zeros(d)
    off[i] = 0.5
    return off


def edge_values(fun: SmoothField, index: Sequence[int], grid: TorusGrid) -> np.ndarray:
    """``(d, N, ...)`` array with component ``i`` = derivative evaluated on edges of direction ``i``."""
    return np.stack([fun.deriv(index, grid, _edge_offset(grid.d, i)) for i in range(grid.d)])


# ---------------------------------------------------------------- test functions

@dataclass(frozen=True)
class TrigPolynomial:
    """``sum_m amp_m cos(2 pi k_m . x + phase_m)`` on the unit torus (zero mean)."""

    modes: tuple

    def __post_init__(self):
        for k, _, _ in self.modes:
            if not any(k):
                raise ValueError("the constant mode is excluded: test functions have zero mean")

    @property
    def d(self) -> int:
        return len(self.modes[0][0])

    def scaled(self, c: float) -> "TrigPolynomial":
        return TrigPolynomial(tuple((k, c * a, p) for k, a, p in self.modes))

    def max_frequency(self) -> int:
        return max(max(abs(int(v)) for v in k) for k, _, _ in self.modes)

    def deriv(self, index: Sequence[int], grid: TorusGrid, offset=None) -> np.ndarray:
        """Exact partial derivative ``d_index`` at cell centres shifted by ``offset`` cells."""
        if 2 * self.max_frequency() >= grid.N:
            raise ValueError("test function is not resolved by the grid")
        x = grid.macro_coords(offset)
        m = len(index)
        out = np.zeros(grid.shape)
        for k, amp, ph in self.modes:
            fac = amp * (2 * np.pi) ** m
            for i in index:
                fac *= k[i]
            if fac == 0.0:
                continue
            arg = sum(2 * np.pi * k[i] * x[i] for i in range(len(k))) + ph + m * np.pi / 2
            out = out + fac * np.cos(arg)
        return out

    def __call__(self, grid: TorusGrid, offset=None) -> np.ndarray:
        return self.deriv((), grid, offset)


@dataclass(frozen=True)
class VectorTestFunction:
    comps: tuple

    @property
    def d(self) -> int:
        return len(self.comps)

    def scaled(self, c: float) -> "VectorTestFunction":
        return VectorTestFunction(tuple(p.scaled(c) for p in self.comps))

    def edge_values(self, grid: TorusGrid) -> np.ndarray:
        return np.stack([p(grid, _edge_offset(grid.d, i)) for i, p in enumerate(self.comps)])

    def cell_values(self, grid: TorusGrid) -> np.ndarray:
        return np.stack([p(grid) for p in self.comps])


def random_trig(d: int, rng: np.random.Generator, n_modes: int = 2, kmax: int = 2) -> TrigPolynomial:
    modes = []
    while len(modes) < n_modes:
        k = tuple(int(v) for v in rng.integers(-kmax, kmax + 1, size=d))
        if not any(k):
            continue
        modes.append((k, float(rng.normal()), float(rng.uniform(0, 2 * np.pi))))
    return TrigPolynomial(tuple(modes))


def random_vector_trig(d: int, rng: np.random.Generator, n_modes: int = 2, kmax: int = 2):
    return VectorTestFunction(tuple(random_trig(d, rng, n_modes, kmax) for _ in range(d)))


class SpectralField:
    """Grid function with trigonometric-interpolation derivatives at any offset.

    The Nyquist modes are discarded so that odd derivatives and half-cell
    shifts stay real.
    """

    def __init__(self, values: np.ndarray, grid: TorusGrid):
        self.grid = grid
        self.values = np.asarray(values, float)
        vh = np.fft.fftn(self.values)
        N = grid.N
        k = np.fft.fftfreq(N, 1.0 / N)
        self._k = [k.reshape([N if j == i else 1 for j in range(grid.d)]) for i in range(grid.d)]
        mask = np.ones(grid.shape, bool)
        for kk in self._k:
            mask &= np.abs(np.broadcast_to(kk, grid.shape)) != N // 2
        self._hat = np.where(mask, vh, 0.0)

    def deriv(self, index: Sequence[int], grid: TorusGrid | None = None, offset=None) -> np.ndarray:
        if grid is not None and grid.N != self.grid.N:
            raise ValueError("spectral field evaluated on a different grid")
        d = self.grid.d
        offset = np.zeros(d) if offset is None else np.asarray(offset, float)
        mult = np.ones(self.grid.shape, complex)
        for i in index:
            mult = mult * (2j * np.pi * self._k[i])
        phase = sum(2j * np.pi * self._k[i] * offset[i] / self.grid.N for i in range(d))
        return np.fft.ifftn(self._hat * mult * np.exp(phase)).real

    def __call__(self, grid=None, offset=None) -> np.ndarray:
        return self.deriv((), grid, offset)


def discrete_derivative(u: np.ndarray, index: Sequence[int], spacing: float, d: int) -> np.ndarray:
    """Product of centred differences ``D_{i_1} ... D_{i_k} u``."""
    out = u
    for i in index:
        out = dc.centered_diff(out, i, spacing, d)
    return out


def l2_norm(F: np.ndarray, grid: TorusGrid) -> float:
    """Macroscopic ``L^2`` norm with cell weight ``N^-d``."""
    return float(np.sqrt(np.sum(F * F) * grid.macro_volume))


# ---------------------------------------------------------------- expansions

def _check_order(cs: CorrectorSet, n: int) -> None:
    if n > cs.n_max:
        raise ValueError(f"order {n} exceeds the hierarchy (built to {cs.n_max})")


def two_scale_F(cs: CorrectorSet, w: SmoothField, n: int) -> np.ndarray:
    """``sum_{k<=n} eps^k phi^k_I(./eps) d^k_I w`` at cell centres."""
    _check_order(cs, n)
    grid, d, eps = cs.grid, cs.d, cs.grid.eps
    out = w.deriv((), grid).copy()
    for k in range(1, n + 1):
        for I in product(range(d), repeat=k):
            out += eps**k * cs.phi[k][I] * w.deriv(I, grid)
    return out


def stationary_column(cs: CorrectorSet, s: int, J: tuple) -> np.ndarray:
    """Edge field ``grad phi^{s+1}_J + phi^s_{J'} e_{j_{s+1}}`` (microscopic gradient, edge-averaged phi)."""
    d, h = cs.d, cs.grid.h
    Y = dc.grad(cs.phi[s + 1][J], h, d)
    j = J[-1]
    p = cs.phi[s][J[:-1]] if s > 0 else np.ones(cs.grid.shape)
    Y[j] += 0.5 * (p + dc.shift(p, j, 1, d))
    return Y


def two_scale_E(cs: CorrectorSet, w: SmoothField, n: int) -> np.ndarray:
    """``sum_{k<n} eps^k (grad phi^{k+1} + phi^k e)(./eps) d^{k+1} w`` on edges."""
    _check_order(cs, n)
    grid, d, eps = cs.grid, cs.d, cs.grid.eps
    out = np.zeros((d,) + grid.shape)
    for s in range(n):
        for J in product(range(d), repeat=s + 1):
            out += eps**s * stationary_column(cs, s, J) * edge_values(w, J, grid)
    return out


def link_identity_residual(cs: CorrectorSet, w: SmoothField, n: int, exact: bool = True) -> float:
    """Relative defect of ``grad F^n = E^n + eps^n phi^n grad d^n w``.

    ``exact=True`` distributes the lattice gradient by the discrete Leibniz rule
    ``grad_i(fg) = grad_i f S_i g + f grad_i g`` with sampled derivatives of
    ``w``, which closes to roundoff; ``exact=False`` compares against the
    analytic-derivative expansion :func:`two_scale_E` and is first order.
    """
    _check_order(cs, n)
    grid, d, eps = cs.grid, cs.d, cs.grid.eps
    D = grid.macro_spacing
    gF = dc.grad(two_scale_F(cs, w, n), D, d)
    if not exact:
        E = two_scale_E(cs, w, n)
        rem = np.zeros_like(E)
        for I in product(range(d), repeat=n):
            p = cs.phi[n][I] if n > 0 else np.ones(grid.shape)
            for i in range(d):
                pe = 0.5 * (p + dc.shift(p, i, 1, d))
                rem[i] += eps**n * pe * w.deriv((i,) + I, grid, _edge_offset(d, i))
        ref = E
    else:
        E = np.zeros((d,) + grid.shape)
        for k in range(n):
            for I in product(range(d), repeat=k):
                W = w.deriv(I, grid)
                p = cs.phi[k][I] if k > 0 else np.ones(grid.shape)
                E += eps**k * p * dc.grad(W, D, d)
                for j in range(d):
                    gphi = dc.grad(cs.phi[k + 1][I + (j,)], grid.h, d)
                    Wj = w.deriv(I + (j,), grid)
                    E += eps**k * gphi * np.stack([dc.shift(Wj, i, 1, d) for i in range(d)])
        rem = np.zeros_like(E)
        for I in product(range(d), repeat=n):
            p = cs.phi[n][I] if n > 0 else np.ones(grid.shape)
            rem += eps**n * p * dc.grad(w.deriv(I, grid), D, d)
        ref = E
    diff = gF - E - rem
    nr = np.linalg.norm(ref)
    return float(np.linalg.norm(diff) / nr) if nr > 0 else float(np.linalg.norm(diff))


# ---------------------------------------------------------------- cascade

def _entries(t) -> np.ndarray:
    return t.entries if isinstance(t, HomogenizedTensor) else np.asarray(t, float)


def tensor_operators(tensors, k: int, d: int) -> dict:
    """Constant flux operators ``abar^k_I`` keyed by the multi-index ``I`` of length ``k - 1``."""
    E = _entries(tensors[k])
    return {I: dc.ConstantFluxOperator(E[I], d) for I in product(range(d), repeat=k - 1)}


@dataclass
class CascadeSolution:
    grid: TorusGrid
    order: int
    components: list = field(repr=False)
    tensors: list = field(repr=False)
    residuals: list = field(default_factory=list)
    dual: bool = False

    @property
    def eps(self) -> float:
        return self.grid.eps

    def assembled(self) -> np.ndarray:
        return sum(self.eps ** (k - 1) * self.components[k - 1] for k in range(1, self.order + 1))

    def field(self) -> SpectralField:
        return SpectralField(self.assembled(), self.grid)

    def component_field(self, k: int) -> SpectralField:
        return SpectralField(self.components[k - 1], self.grid)


def homogenized_cascade(tensors, f, n: int, grid: TorusGrid, dual: bool = False) -> CascadeSolution:
    """Triangular constant-coefficient cascade solved exactly by FFT.

    ``-div(abar^1 grad u1) = div f`` and for ``m >= 2``
    ``-div(abar^1 grad u_m) = div sum_{k=2}^m abar^k_I grad D^{k-1}_I u_{m+1-k}``.
    ``f`` is a :class:`VectorTestFunction` or an edge array.
    """
    d = grid.d
    D = grid.macro_spacing
    if len(tensors) <= n or any(tensors[k] is None for k in range(1, n + 1)):
        raise ValueError(f"effective tensors up to order {n} are required")
    A1 = _entries(tensors[1])
    lo = np.linalg.eigvalsh(0.5 * (A1 + A1.T))[0]
    if not lo > 0:
        raise np.linalg.LinAlgError(f"first-order effective matrix is not elliptic (min eig {lo:.3e})")
    op1 = dc.ConstantFluxOperator(A1, d)
    fe = f.edge_values(grid) if hasattr(f, "edge_values") else np.asarray(f, float)
    comps, residuals = [], []
    ops = {k: tensor_operators(tensors, k, d) for k in range(2, n + 1)}
    for m in range(1, n + 1):
        if m == 1:
            F = fe
        else:
            F = np.zeros((d,) + grid.shape)
            for k in range(2, m + 1):
                src = comps[m - k]  # u_{m+1-k}
                for I, op in ops[k].items():
                    F = F + op(dc.grad(discrete_derivative(src, I, D, d), D, d))
        u = dc.solve_constant(op1, F, D)
        r = dc.div(op1(dc.grad(u, D, d)) + F, D, d)
        b = np.linalg.norm(dc.div(F, D, d))
        residuals.append(float(np.linalg.norm(r) / b) if b > 0 else float(np.linalg.norm(r)))
        comps.append(u)
    return CascadeSolution(grid, n, comps, list(tensors[: n + 1]), residuals, dual)


# ---------------------------------------------------------------- heterogeneous problem

@dataclass
class HeterogeneousSolution:
    u: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)
    report: dc.SolverReport | None = None


def solve_heterogeneous(coef: CoefficientField, f, tol: float = 1e-10) -> HeterogeneousSolution:
    """``-div(a(./eps) grad u) = div f`` on the unit torus (pass ``coef.transpose()`` for the dual)."""
    grid = coef.grid
    D = grid.macro_spacing
    fe = f.edge_values(grid) if hasattr(f, "edge_values") else np.asarray(f, float)
    u, rep = dc.solve_divform(coef.operator, fe, D, tol)
    return HeterogeneousSolution(u, dc.grad(u, D, grid.d), rep)


def expansion_error(sol: HeterogeneousSolution, cs: CorrectorSet, cascade: CascadeSolution,
                    n: int) -> float:
    """``|| grad(u_eps - F^n[ubar^n]) ||_{L^2}`` on the unit torus."""
    grid = cs.grid
    F = two_scale_F(cs, cascade.field(), n)
    diff = sol.grad - dc.grad(F, grid.macro_spacing, grid.d)
    return l2_norm(diff, grid)


# ---------------------------------------------------------------- intertwining

def rhs_column_product(coef: CoefficientField, cs: CorrectorSet, n: int, I: tuple,
                       weights: np.ndarray) -> np.ndarray:
    """Edge field ``sum_k (a phi^n_I - sigma^n_I) e_k * W_k`` with cell weights ``W`` (edge-averaged)."""
    from .correctors import phi_column, sigma_column

    d = cs.d
    out = np.zeros((d,) + cs.grid.shape)
    p = cs.phi[n][I] if n > 0 else 1.0
    for k in range(d):
        col = phi_column(coef.a, p, k, d)
        if n > 0:
            col = col - sigma_column(cs.sigma[n][I], k, d)
        Wk = weights[k]
        out += col * np.stack([0.5 * (Wk + dc.shift(Wk, i, 1, d)) for i in range(d)])
    return out


def intertwining_residual(coef: CoefficientField, cs: CorrectorSet, w, n: int) -> float:
    """Relative defect of the divergence-form equation satisfied by ``F^n[w]``.

    Every derivative of ``w`` is a centred lattice difference of its samples,
    so the check runs entirely in the discrete setting.
    """
    _check_order(cs, n)
    grid, d, eps = cs.grid, cs.d, cs.grid.eps
    D = grid.macro_spacing
    ws = w(grid) if callable(w) and not isinstance(w, np.ndarray) else np.asarray(w, float)
    F = ws.copy()
    for k in range(1, n + 1):
        for I in product(range(d), repeat=k):
            F += eps**k * cs.phi[k][I] * discrete_derivative(ws, I, D, d)
    A = coef.operator
    lhs = dc.div(A(dc.grad(F, D, d)), D, d)
    flux = np.zeros((d,) + grid.shape)
    for k in range(1, n + 1):
        for I, op in tensor_operators(cs.abar, k, d).items():
            flux += eps ** (k - 1) * op(dc.grad(discrete_derivative(ws, I, D, d), D, d))
    for I in product(range(d), repeat=n):
        DI = discrete_derivative(ws, I, D, d)
        W = np.stack([dc.centered_diff(DI, c, D, d) for c in range(d)])
        flux += eps**n * rhs_column_product(coef, cs, n, I, W)
    rhs = dc.div(flux, D, d)
    nl = np.linalg.norm(lhs)
    diff = np.linalg.norm(lhs - rhs)
    return float(diff / nl) if nl > 0 else float(diff)


# ---------------------------------------------------------------- rate model

@dataclass(frozen=True)
class RateModel:
    """Predicted size ``eps^n mu_{d,n}(1/eps)`` for ``1 <= n <= ceil(d/2)``."""

    d: int
    n: int

    @property
    def ell(self) -> int:
        return math.ceil(self.d / 2)

    def __post_init__(self):
        if not (1 <= self.n <= math.ceil(self.d / 2)):
            raise ValueError(f"no stationary prediction for n={self.n} in d={self.d}")

    @property
    def case(self) -> str:
        if self.n < self.ell:
            return "n<ell"
        return "n=ell,d-even" if self.d % 2 == 0 else "n=ell,d-odd"

    def __call__(self, eps):
        eps = np.asarray(eps, float)
        if self.case == "n<ell":
            return eps**self.n
        if self.case == "n=ell,d-even":
            return eps ** (self.d / 2) * np.sqrt(np.abs(np.log(eps)))
        return eps ** (self.d / 2)

    def exponent(self) -> float:
        """Leading power of ``eps`` (log factors dropped)."""
        return float(self.n) if self.case == "n<ell" else self.d / 2
