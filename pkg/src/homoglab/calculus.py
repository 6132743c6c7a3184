"""Compatible discrete vector calculus on the periodic lattice.

Layout conventions (shared by every module):

* scalar fields live on cells and have shape ``(N,) * d``;
* vector fields live on edges and have shape ``(d,) + (N,) * d``; component
  ``i`` at index ``x`` sits on the edge from ``x`` to ``x + e_i``;
* skew matrix fields live on plaquettes and have shape ``(npairs,) + (N,) * d``
  with one entry per pair ``i < j`` (see :func:`pair_index`); entry ``(i, j)``
  at index ``x`` sits at ``x + (e_i + e_j) / 2``.

Only the trailing ``d`` axes are spatial, so leading batch axes are allowed
everywhere except where noted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

__all__ = [
    "SolverError",
    "SolvabilityError",
    "SolverReport",
    "pair_index",
    "pairs",
    "skew_component",
    "grad",
    "div",
    "curl_pair",
    "div_skew",
    "shift",
    "centered_diff",
    "edge_to_cell",
    "cell_to_edge",
    "FluxOperator",
    "ConstantFluxOperator",
    "grad_symbols",
    "laplacian_symbol",
    "solve_poisson",
    "solve_constant",
    "solve_divform",
    "inner",
]


class SolverError(RuntimeError):
    """Iterative solve failed; carries the :class:`SolverReport`."""

    def __init__(self, message: str, report: "SolverReport | None" = None):
        super().__init__(message)
        self.report = report


class SolvabilityError(ValueError):
    """Right-hand side is not in the range of a periodic operator."""


@dataclass
class SolverReport:
    iterations: int
    residual: float
    tol: float
    preconditioner: str
    converged: bool = True
    history: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- indexing

def pairs(d: int) -> list[tuple[int, int]]:
    return list(combinations(range(d), 2))


def pair_index(i: int, j: int, d: int) -> tuple[int, float]:
    """Storage slot and sign of the skew entry ``(i, j)``; ``i != j``."""
    if i == j:
        raise ValueError("diagonal of a skew field is identically zero")
    sign = 1.0
    if i > j:
        i, j, sign = j, i, -1.0
    return pairs(d).index((i, j)), sign


def skew_component(sigma: np.ndarray, i: int, j: int, d: int) -> np.ndarray:
    """Entry ``(i, j)`` of a skew field stored by pairs (zeros on the diagonal)."""
    if i == j:
        return np.zeros(sigma.shape[1:])
    slot, sign = pair_index(i, j, d)
    return sign * sigma[slot]


def _spatial_axis(arr: np.ndarray, d: int, i: int) -> int:
    return arr.ndim - d + i


def shift(u: np.ndarray, i: int, k: int, d: int) -> np.ndarray:
    """``(S_i^k u)(x) = u(x + k e_i)`` along spatial direction ``i``."""
    return np.roll(u, -k, axis=_spatial_axis(u, d, i))


# ---------------------------------------------------------------- stencils

def grad(u: np.ndarray, spacing: float, d: int | None = None) -> np.ndarray:
    """Forward-difference gradient; output has a new leading component axis."""
    d = u.ndim if d is None else d
    out = np.stack([(shift(u, i, 1, d) - u) for i in range(d)], axis=-d - 1)
    return out / spacing


def div(F: np.ndarray, spacing: float, d: int | None = None) -> np.ndarray:
    """Backward-difference divergence, the negative adjoint of :func:`grad`."""
    d = F.ndim - 1 if d is None else d
    comp = F.ndim - d - 1
    out = np.zeros(F.shape[:comp] + F.shape[comp + 1:])
    for i in range(d):
        Fi = np.take(F, i, axis=comp)
        out += Fi - shift(Fi, i, -1, d)
    return out / spacing


def curl_pair(F: np.ndarray, spacing: float, d: int | None = None) -> np.ndarray:
    """``(X_j(x+e_i) - X_j(x)) - (X_i(x+e_j) - X_i(x))`` over ``h`` for ``i < j``."""
    d = F.ndim - 1 if d is None else d
    comp = F.ndim - d - 1
    out = []
    for i, j in pairs(d):
        Fi = np.take(F, i, axis=comp)
        Fj = np.take(F, j, axis=comp)
        out.append((shift(Fj, i, 1, d) - Fj) - (shift(Fi, j, 1, d) - Fi))
    if not out:
        return np.zeros(F.shape[:comp] + (0,) + F.shape[comp + 1:])
    return np.stack(out, axis=comp) / spacing


def div_skew(sigma: np.ndarray, spacing: float, d: int) -> np.ndarray:
    """Row divergence ``(div sigma)_i = sum_j backward_j sigma_ij`` onto edges.

    This is the adjoint of :func:`curl_pair`, so
    ``div_skew(solve(-Lap, curl q)) = q`` whenever ``div q = 0``.
    """
    comp = sigma.ndim - d - 1
    shape = sigma.shape[:comp] + (d,) + sigma.shape[comp + 1:]
    out = np.zeros(shape)
    for slot, (i, j) in enumerate(pairs(d)):
        s = np.take(sigma, slot, axis=comp)
        # entry (i, j) differentiated along j feeds component i; (j, i) = -(i, j)
        idx_i = [slice(None)] * out.ndim
        idx_i[comp] = i
        idx_j = [slice(None)] * out.ndim
        idx_j[comp] = j
        out[tuple(idx_i)] += s - shift(s, j, -1, d)
        out[tuple(idx_j)] -= s - shift(s, i, -1, d)
    return out / spacing


def centered_diff(u: np.ndarray, i: int, spacing: float, d: int) -> np.ndarray:
    """Centered difference ``(u(x+e_i) - u(x-e_i)) / 2h``; antisymmetric, location preserving."""
    return (shift(u, i, 1, d) - shift(u, i, -1, d)) / (2.0 * spacing)


def edge_to_cell(F: np.ndarray, d: int) -> np.ndarray:
    """Average each edge component onto cells: ``(F_j(x) + F_j(x - e_j)) / 2``."""
    comp = F.ndim - d - 1
    out = np.empty_like(F)
    for j in range(d):
        idx = [slice(None)] * F.ndim
        idx[comp] = j
        Fj = F[tuple(idx)]
        out[tuple(idx)] = 0.5 * (Fj + shift(Fj, j, -1, d))
    return out


def cell_to_edge(W: np.ndarray, d: int) -> np.ndarray:
    """Adjoint of :func:`edge_to_cell`: ``(W_i(x) + W_i(x + e_i)) / 2``."""
    comp = W.ndim - d - 1
    out = np.empty_like(W)
    for i in range(d):
        idx = [slice(None)] * W.ndim
        idx[comp] = i
        Wi = W[tuple(idx)]
        out[tuple(idx)] = 0.5 * (Wi + shift(Wi, i, 1, d))
    return out


def inner(F: np.ndarray, G: np.ndarray, weight: float = 1.0) -> float:
    return float(weight * np.vdot(F, G).real)


# ---------------------------------------------------------------- flux operator

class FluxOperator:
    """Edge-to-edge flux ``F -> a F`` for a cell-centred matrix field ``a``.

    Diagonal entries act through the edge average of ``a_ii`` over the two
    cells adjacent to the edge. Off-diagonal entries act through the cell
    average ``P``: ``P^T (a_offdiag P F)``. The transpose of the operator
    built from ``a`` is exactly the operator built from ``a^T``, and the
    operator is coercive with the ellipticity constant of ``a``.

    ``a`` has shape ``(d, d) + (N,) * d``.
    """

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        d = a.shape[0]
        if a.shape[:2] != (d, d) or a.ndim != d + 2:
            raise ValueError(f"coefficient shape {a.shape} is not (d, d, N, ...)")
        self.d = d
        self.a = a
        self.edge_diag = np.stack(
            [0.5 * (a[i, i] + shift(a[i, i], i, 1, d)) for i in range(d)]
        )
        off = a.copy()
        for i in range(d):
            off[i, i] = 0.0
        self.offdiag = off
        self.has_offdiag = bool(np.any(off != 0.0))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.a.shape[2:]

    def transpose(self) -> "FluxOperator":
        return FluxOperator(np.swapaxes(self.a, 0, 1))

    def __call__(self, F: np.ndarray) -> np.ndarray:
        d = self.d
        out = self.edge_diag * F
        if self.has_offdiag:
            PF = edge_to_cell(F, d)
            out = out + cell_to_edge(_matvec(self.offdiag, PF, d), d)
        return out

    def mean_matrix(self) -> np.ndarray:
        axes = tuple(range(2, 2 + self.d))
        return self.a.mean(axis=axes)


def _matvec(a: np.ndarray, V: np.ndarray, d: int) -> np.ndarray:
    """Pointwise ``a(x) V(x)`` with ``a`` of shape (d, d, *sp) and ``V`` of (..., d, *sp)."""
    comp = V.ndim - d - 1
    out = np.zeros_like(V)
    for i in range(d):
        acc = 0.0
        for j in range(d):
            if np.any(a[i, j] != 0.0):
                acc = acc + a[i, j] * np.take(V, j, axis=comp)
        idx = [slice(None)] * V.ndim
        idx[comp] = i
        out[tuple(idx)] = acc
    return out


class ConstantFluxOperator:
    """Flux operator of a constant matrix on the same stencil as :class:`FluxOperator`.

    For ``abar = c Id`` this is multiplication by ``c``; in general the
    diagonal acts pointwise and the off-diagonal part through ``P^T abar P``.
    Works on fields with arbitrary leading batch axes.
    """

    def __init__(self, abar: np.ndarray, d: int | None = None):
        abar = np.atleast_2d(np.asarray(abar, dtype=float))
        self.d = abar.shape[0] if d is None else d
        self.abar = abar
        self.diag = np.diag(abar).copy()
        self.offdiag = abar - np.diag(self.diag)
        self.has_offdiag = bool(np.any(self.offdiag != 0.0))

    def transpose(self) -> "ConstantFluxOperator":
        return ConstantFluxOperator(self.abar.T, self.d)

    def __call__(self, F: np.ndarray) -> np.ndarray:
        d = self.d
        comp = F.ndim - d - 1
        bshape = [1] * F.ndim
        bshape[comp] = d
        out = self.diag.reshape(bshape) * F
        if self.has_offdiag:
            PF = edge_to_cell(F, d)
            W = np.tensordot(self.offdiag, np.moveaxis(PF, comp, 0), axes=(1, 0))
            out = out + cell_to_edge(np.moveaxis(W, 0, comp), d)
        return out

    def symbol(self, shape: tuple[int, ...]) -> np.ndarray:
        """Matrix symbol ``(d, d, *shape)`` of the edge-to-edge map in the numpy FFT convention."""
        d = self.d
        theta = _angles(shape)
        p = [(1.0 + np.exp(-1j * t)) / 2.0 for t in theta]
        sym = np.zeros((d, d) + tuple(shape), dtype=complex)
        for i in range(d):
            sym[i, i] = self.diag[i]
            for j in range(d):
                if i != j and self.offdiag[i, j] != 0.0:
                    sym[i, j] = np.conj(p[i]) * self.offdiag[i, j] * p[j]
        return sym


# ---------------------------------------------------------------- FFT symbols

def _angles(shape: tuple[int, ...]) -> list[np.ndarray]:
    d = len(shape)
    out = []
    for i, n in enumerate(shape):
        t = 2.0 * np.pi * np.fft.fftfreq(n)
        s = [1] * d
        s[i] = n
        out.append(t.reshape(s))
    return out


def grad_symbols(shape: tuple[int, ...], spacing: float) -> list[np.ndarray]:
    """Symbols ``(e^{i theta_j} - 1) / h`` of the forward differences."""
    return [(np.exp(1j * t) - 1.0) / spacing for t in _angles(shape)]


def laplacian_symbol(shape: tuple[int, ...], spacing: float) -> np.ndarray:
    """Symbol of ``-div grad``: ``4/h^2 sum_i sin^2(pi k_i / N)``."""
    out = 0.0
    for t in _angles(shape):
        out = out + np.sin(t / 2.0) ** 2
    return 4.0 * out / spacing**2


def operator_symbol(op: ConstantFluxOperator, shape, spacing) -> np.ndarray:
    """Scalar symbol of ``-div (abar grad)`` in the numpy FFT convention."""
    g = grad_symbols(shape, spacing)
    sym = op.symbol(shape)
    d = op.d
    out = np.zeros(tuple(shape), dtype=complex)
    for i in range(d):
        for j in range(d):
            out = out + np.conj(g[i]) * sym[i, j] * g[j]
    return out


def _check_mean(rhs: np.ndarray, d: int, tol: float = 1e-12) -> None:
    axes = tuple(range(rhs.ndim - d, rhs.ndim))
    mean = np.abs(rhs.mean(axis=axes))
    scale = max(float(np.max(np.abs(rhs))), 1e-300)
    if np.any(mean > tol * scale):
        raise SolvabilityError(f"right-hand side has nonzero mean {float(np.max(mean)):.3e}")


def solve_poisson(rhs: np.ndarray, spacing: float, d: int | None = None,
                  check_mean: bool = True) -> np.ndarray:
    """Zero-mean solution of ``-div grad u = rhs`` by FFT with the exact discrete symbol."""
    d = rhs.ndim if d is None else d
    if check_mean:
        _check_mean(rhs, d)
    axes = tuple(range(rhs.ndim - d, rhs.ndim))
    sym = laplacian_symbol(rhs.shape[-d:], spacing)
    sym.flat[0] = 1.0
    uh = np.fft.fftn(rhs, axes=axes) / sym
    uh[(Ellipsis,) + (0,) * d] = 0.0
    return np.fft.ifftn(uh, axes=axes).real


def solve_constant(op: ConstantFluxOperator, F: np.ndarray, spacing: float) -> np.ndarray:
    """Zero-mean ``u`` with ``-div(abar grad u) = div F`` by FFT (exact for constant ``abar``)."""
    d = op.d
    shape = F.shape[-d:]
    axes = tuple(range(F.ndim - d, F.ndim))
    g = grad_symbols(shape, spacing)
    Fh = np.fft.fftn(F, axes=axes)
    comp = F.ndim - d - 1
    # div F has symbol -conj(g) . F
    rhs = 0.0
    for j in range(d):
        rhs = rhs - np.conj(g[j]) * np.take(Fh, j, axis=comp)
    sym = operator_symbol(op, shape, spacing)
    sym.flat[0] = 1.0
    uh = rhs / sym
    uh[(Ellipsis,) + (0,) * d] = 0.0
    return np.fft.ifftn(uh, axes=tuple(range(uh.ndim - d, uh.ndim))).real


# ---------------------------------------------------------------- iterative solver

def _norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.vdot(x, x).real))


def solve_divform(A: FluxOperator, F: np.ndarray, spacing: float, tol: float = 1e-10,
                  maxiter: int = 2000, symmetric: bool | None = None,
                  max_restarts: int = 3) -> tuple[np.ndarray, SolverReport]:
    """Zero-mean ``u`` with ``-div(A grad u) = div F`` to ``tol`` relative residual.

    The stopping test is the unpreconditioned residual
    ``||div(A grad u + F)|| <= tol ||div F||``. Symmetric coefficients use
    preconditioned CG; otherwise preconditioned BiCGSTAB. The
    preconditioner inverts the constant-coefficient operator of the mean
    matrix by FFT. If the true residual misses ``tol`` when the recursion
    stops, the solve restarts on the residual up to ``max_restarts`` times.
    """
    if not (0.0 < tol <= 1e-6):
        raise ValueError(f"tol must lie in (0, 1e-6], got {tol}")
    d = A.d
    b = div(F, spacing, d)
    bnorm = _norm(b)
    if bnorm == 0.0:
        return np.zeros(b.shape), SolverReport(0, 0.0, tol, "fft-mean")
    abar = A.mean_matrix()
    if symmetric is None:
        symmetric = bool(np.allclose(A.a, np.swapaxes(A.a, 0, 1), rtol=0, atol=0))
    pre_op = ConstantFluxOperator(0.5 * (abar + abar.T) if symmetric else abar, d)
    pre_sym = operator_symbol(pre_op, b.shape, spacing)
    pre_sym.flat[0] = 1.0

    def apply(u):
        return -div(A(grad(u, spacing, d)), spacing, d)

    def precond(r):
        zh = np.fft.fftn(r) / pre_sym
        zh.flat[0] = 0.0
        return np.fft.ifftn(zh).real

    inner = _pcg if symmetric else _pbicgstab
    name = "fft-mean/cg" if symmetric else "fft-mean/bicgstab"
    u = np.zeros_like(b)
    r, it, hist = b, 0, []
    # restart on the true residual: near roundoff the recursive residual drifts
    for _ in range(1 + max_restarts):
        du, k, _, h = inner(apply, precond, r, bnorm, tol, maxiter - it)
        u += du
        it += k
        hist.extend(h)
        r = b - apply(u)
        res = _norm(r) / bnorm
        if res <= tol or it >= maxiter:
            break
    u -= u.mean()
    report = SolverReport(it, res, tol, name, res <= tol, hist)
    if res > tol:
        raise SolverError(f"no convergence after {it} iterations (residual {res:.3e})", report)
    return u, report


def _pcg(apply, precond, b, bnorm, tol, maxiter):
    u = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    hist = []
    res = _norm(r) / bnorm
    it = 0
    while res > tol and it < maxiter:
        Ap = apply(p)
        alpha = rz / float(np.vdot(p, Ap).real)
        u += alpha * p
        r -= alpha * Ap
        it += 1
        res = _norm(r) / bnorm
        hist.append(res)
        if res <= tol:
            break
        z = precond(r)
        rz_new = float(np.vdot(r, z).real)
        p = z + (rz_new / rz) * p
        rz = rz_new
    # true residual guards against drift of the recursive one
    res = _norm(b - apply(u)) / bnorm
    return u, it, res, hist


def _pbicgstab(apply, precond, b, bnorm, tol, maxiter):
    u = np.zeros_like(b)
    r = b.copy()
    r0 = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    hist = []
    res = _norm(r) / bnorm
    it = 0
    while res > tol and it < maxiter:
        rho_new = float(np.vdot(r0, r).real)
        if rho_new == 0.0:
            break
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        ph = precond(p)
        v = apply(ph)
        alpha = rho_new / float(np.vdot(r0, v).real)
        s = r - alpha * v
        u += alpha * ph
        if _norm(s) / bnorm <= tol:
            r = s
            it += 1
            res = _norm(r) / bnorm
            break
        sh = precond(s)
        t = apply(sh)
        omega = float(np.vdot(t, s).real) / float(np.vdot(t, t).real)
        u += omega * sh
        r = s - omega * t
        rho = rho_new
        it += 1
        res = _norm(r) / bnorm
        hist.append(res)
    res = _norm(b - apply(u)) / bnorm
    return u, it, res, hist
