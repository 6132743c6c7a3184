"""Gaussian coefficient fields ``a = a0(c0 * xi)`` on the periodic lattice."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .calculus import FluxOperator

__all__ = [
    "ConfigError",
    "DomainTooSmallError",
    "SymmetryError",
    "EllipticityError",
    "TorusGrid",
    "KernelC0",
    "raised_cosine_kernel",
    "validate_kernel",
    "kernel_norm",
    "covariance_kernel",
    "WhiteNoiseSample",
    "sample_white_noise",
    "coarsen_noise",
    "GaussianFieldSample",
    "build_gaussian_field",
    "CoefficientMapSpec",
    "CoefficientField",
    "coefficient_from_field",
    "constant_coefficient",
    "sample_coefficient",
    "shift_noise",
]


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class DomainTooSmallError(ConfigError):
    pass


class SymmetryError(ValueError):
    pass


class EllipticityError(ValueError):
    """Coefficient map violates boundedness or ellipticity; carries a witness."""

    def __init__(self, message: str, witness: dict | None = None):
        super().__init__(message)
        self.witness = witness or {}


# ---------------------------------------------------------------- grid

@dataclass(frozen=True)
class TorusGrid:
    """Periodic lattice ``(Z / N Z)^d`` of side ``L`` in microscopic units.

    Cell ``k`` sits at microscopic position ``k h`` and at macroscopic
    position ``k / N`` on the unit torus, so ``eps = 1 / L``.
    """

    d: int
    N: int
    L: float

    def __post_init__(self):
        if not (1 <= self.d <= 3):
            raise ConfigError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise ConfigError(f"cells per side must be a power of two >= 8, got {self.N}")
        if not self.L > 0:
            raise ConfigError(f"side length must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def eps(self) -> float:
        return 1.0 / self.L

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def macro_spacing(self) -> float:
        return 1.0 / self.N

    @property
    def macro_volume(self) -> float:
        return float(self.N) ** (-self.d)

    def coarsen(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.d, self.N // factor, self.L)

    def macro_coords(self, offset=None) -> list[np.ndarray]:
        """Broadcastable macroscopic coordinates of cells shifted by ``offset`` (in cells)."""
        offset = np.zeros(self.d) if offset is None else np.asarray(offset, float)
        out = []
        for i in range(self.d):
            s = [1] * self.d
            s[i] = self.N
            out.append(((np.arange(self.N) + offset[i]) / self.N).reshape(s))
        return out

    def to_dict(self) -> dict:
        return {"d": self.d, "N": self.N, "L": self.L}


# ---------------------------------------------------------------- kernel

@dataclass
class KernelC0:
    """Finitely supported even kernel sampled at lattice spacing ``h``.

    ``taps`` has shape ``(kappa, kappa) + (2 R0 + 1,) * d``; the centre tap is
    offset zero.
    """

    taps: np.ndarray
    h: float
    name: str = "custom"
    normalization: float = 1.0

    @property
    def kappa(self) -> int:
        return self.taps.shape[0]

    @property
    def d(self) -> int:
        return self.taps.ndim - 2

    @property
    def radius(self) -> int:
        return (self.taps.shape[2] - 1) // 2

    def offsets(self) -> np.ndarray:
        R = self.radius
        grids = np.meshgrid(*[np.arange(-R, R + 1)] * self.d, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def tap(self, offset) -> np.ndarray:
        """kappa x kappa matrix at an integer offset (zero outside the support)."""
        offset = np.asarray(offset, int)
        R = self.radius
        if np.any(np.abs(offset) > R):
            return np.zeros((self.kappa, self.kappa))
        return self.taps[(slice(None), slice(None)) + tuple(offset + R)]

    def is_even(self) -> bool:
        flipped = self.taps[(slice(None), slice(None)) + (slice(None, None, -1),) * self.d]
        return bool(np.array_equal(self.taps, flipped))

    @cached_property
    def digest(self) -> str:
        m = hashlib.sha256()
        m.update(np.ascontiguousarray(self.taps, dtype="<f8").tobytes())
        m.update(repr(float(self.h)).encode())
        return m.hexdigest()[:16]

    def embed(self, shape: tuple[int, ...]) -> np.ndarray:
        """Periodic embedding ``(kappa, kappa) + shape`` with offset zero at index zero."""
        R = self.radius
        if 2 * R >= min(shape):
            raise DomainTooSmallError(f"kernel support 2*{R} does not fit a torus of {shape}")
        out = np.zeros((self.kappa, self.kappa) + tuple(shape))
        for off in self.offsets():
            pos = tuple(int(o) % n for o, n in zip(off, shape))
            out[(slice(None), slice(None)) + pos] = self.tap(off)
        return out


def _tap_magnitude(taps: np.ndarray) -> np.ndarray:
    """Pointwise spectral norm of the kappa x kappa tap matrices."""
    k = taps.shape[0]
    if k == 1:
        return np.abs(taps[0, 0])
    mats = np.moveaxis(taps, (0, 1), (-2, -1))
    return np.linalg.norm(mats, ord=2, axis=(-2, -1))


def kernel_norm(kernel: KernelC0) -> float:
    """Lattice surrogate of ``int sup_{B(x)} |c0| dx``.

    The supremum runs over taps within physical distance 1 of the lattice
    point ``x``; the integral is the lattice sum weighted by ``h^d``.
    """
    d, h = kernel.d, kernel.h
    m = int(np.floor(1.0 / h + 1e-12))
    mag = np.pad(_tap_magnitude(kernel.taps), m)
    r = np.arange(-m, m + 1)
    dist2 = sum(np.meshgrid(*[r**2] * d, indexing="ij"))
    footprint = dist2 * h * h <= 1.0 + 1e-12
    sup = ndimage.maximum_filter(mag, footprint=footprint, mode="constant", cval=0.0)
    return float(sup.sum() * h**d)


def validate_kernel(kernel: KernelC0) -> KernelC0:
    """Rescale so that :func:`kernel_norm` equals one; rejects non-even taps."""
    if not kernel.is_even():
        raise SymmetryError("kernel taps are not even: c0(-x) != c0(x)")
    norm = kernel_norm(kernel)
    if norm == 0.0:
        raise ConfigError("kernel vanishes identically")
    if norm == 1.0:
        return kernel
    return KernelC0(kernel.taps / norm, kernel.h, kernel.name, kernel.normalization / norm)


def raised_cosine_kernel(d: int, h: float, radius: float = 2.0, kappa: int = 1,
                         power: int = 1, normalize: bool = True) -> KernelC0:
    """Tensorised bump ``prod_i ((1 + cos(pi y_i / radius)) / 2)^power`` times ``Id_kappa``.

    ``radius`` is in microscopic units; taps are sampled at spacing ``h``.
    """
    R0 = int(np.ceil(radius / h - 1e-9)) - 1
    k = np.arange(-R0, R0 + 1) * h
    prof = ((1.0 + np.cos(np.pi * k / radius)) / 2.0) ** power
    bump = prof
    for _ in range(d - 1):
        bump = np.multiply.outer(bump, prof)
    taps = np.einsum("ab,...->ab...", np.eye(kappa), bump)
    kern = KernelC0(taps, h, f"raised-cosine(r={radius},p={power})")
    return validate_kernel(kern) if normalize else kern


def covariance_kernel(kernel: KernelC0) -> KernelC0:
    """``c = c0 * c0`` with lattice weight ``h^d`` (support radius doubles)."""
    d, R, kap = kernel.d, kernel.radius, kernel.kappa
    out = np.zeros((kap, kap) + (4 * R + 1,) * d)
    for off in kernel.offsets():
        t = kernel.tap(off)
        sl = tuple(slice(int(o) + R, int(o) + 3 * R + 1) for o in off)
        # c(y) = sum_z c0(y - z) c0(z)^T h^d with z = -off
        out[(slice(None), slice(None)) + sl] += np.einsum(
            "ab...,cb->ac...", kernel.taps, t) * kernel.h**d
    return KernelC0(out, kernel.h, f"cov[{kernel.name}]")


# ---------------------------------------------------------------- noise and field

@dataclass(frozen=True)
class WhiteNoiseSample:
    grid: TorusGrid
    kappa: int
    values: np.ndarray = field(repr=False)
    seed: int | None = None


def sample_white_noise(grid: TorusGrid, kappa: int = 1, seed: int = 0) -> WhiteNoiseSample:
    """i.i.d. centred Gaussians of variance ``h^-d`` per cell and channel."""
    if kappa < 1:
        raise ConfigError("kappa must be >= 1")
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((kappa,) + grid.shape) * grid.h ** (-grid.d / 2)
    return WhiteNoiseSample(grid, kappa, vals, seed)


def coarsen_noise(noise: WhiteNoiseSample, factor: int = 2) -> WhiteNoiseSample:
    """Average blocks of ``factor^d`` cells; keeps the variance law ``h^-d`` of the coarse grid."""
    g = noise.grid
    coarse = g.coarsen(factor)
    v = noise.values.reshape(
        (noise.kappa,) + sum(((coarse.N, factor) for _ in range(g.d)), ()))
    v = v.mean(axis=tuple(range(2, 2 + 2 * g.d, 2)))
    return WhiteNoiseSample(coarse, noise.kappa, v, noise.seed)


def shift_noise(noise: WhiteNoiseSample, v) -> WhiteNoiseSample:
    axes = tuple(range(1, 1 + noise.grid.d))
    return WhiteNoiseSample(noise.grid, noise.kappa,
                            np.roll(noise.values, tuple(v), axis=axes), noise.seed)


@dataclass(frozen=True)
class GaussianFieldSample:
    grid: TorusGrid
    values: np.ndarray = field(repr=False)
    seed: int | None = None
    kernel_id: str = ""


def build_gaussian_field(noise: WhiteNoiseSample, kernel: KernelC0,
                         method: str = "auto") -> GaussianFieldSample:
    """``G(x) = sum_y c0(x - y) xi(y) h^d`` by direct summation or FFT.

    ``method='auto'`` uses FFT for ``N >= 32`` and direct summation otherwise.
    """
    g = noise.grid
    if kernel.kappa != noise.kappa:
        raise ConfigError(f"kernel has {kernel.kappa} channels, noise has {noise.kappa}")
    if kernel.d != g.d:
        raise ConfigError(f"kernel dimension {kernel.d} != grid dimension {g.d}")
    if not np.isclose(kernel.h, g.h, rtol=1e-12):
        raise ConfigError(f"kernel sampled at h={kernel.h}, grid has h={g.h}")
    if 2 * kernel.radius >= g.N:
        raise DomainTooSmallError(
            f"kernel support radius {kernel.radius} needs N > {2 * kernel.radius}, got {g.N}")
    if method == "auto":
        method = "fft" if g.N >= 32 else "direct"
    w = g.h ** g.d
    axes = tuple(range(1, 1 + g.d))
    if method == "direct":
        out = np.zeros_like(noise.values)
        for off in kernel.offsets():
            t = kernel.tap(off)
            if not np.any(t):
                continue
            rolled = np.roll(noise.values, tuple(int(o) for o in off), axis=axes)
            out += np.einsum("ab,b...->a...", t, rolled)
        out *= w
    elif method == "fft":
        kh = np.fft.rfftn(kernel.embed(g.shape), axes=tuple(range(2, 2 + g.d)))
        xh = np.fft.rfftn(noise.values, axes=axes)
        out = np.fft.irfftn(np.einsum("ab...,b...->a...", kh, xh), s=g.shape, axes=axes) * w
    else:
        raise ConfigError(f"unknown convolution method {method!r}")
    return GaussianFieldSample(g, out, noise.seed, kernel.digest)


# ---------------------------------------------------------------- coefficient maps

def _sig(t):
    return 0.5 * (1.0 + np.tanh(t))


def _dsig(t):
    return 0.5 / np.cosh(t) ** 2


def _ddsig(t):
    return -np.tanh(t) / np.cosh(t) ** 2


_KINDS = ("clipped-sigmoid-isotropic", "diagonal-anisotropic",
          "nonsymmetric-with-skew-part", "linear", "constant")


@dataclass(frozen=True)
class CoefficientMapSpec:
    """Pointwise map ``g -> a0(g)`` from channel values to ``d x d`` matrices.

    Builtins (``t = gain * g``, ``s = (1 + tanh t) / 2``):

    * ``clipped-sigmoid-isotropic``: ``(lam + (1 - lam) s(t_0)) Id``;
    * ``diagonal-anisotropic``: ``a_ii = lam + (1 - lam) s((-1)^i t_{i mod kappa})``;
    * ``nonsymmetric-with-skew-part``: ``(lam + (top - lam) s) Id + skew s J`` with
      ``J = e_0 e_1^T - e_1 e_0^T`` and ``top = sqrt(1 - skew^2)``;
    * ``linear`` (tests only, needs ``waive_ellipticity``): ``(offset + slope g_0) Id``;
    * ``constant``: ``value Id``.
    """

    kind: str = "clipped-sigmoid-isotropic"
    lam: float = 0.25
    gain: float = 1.0
    skew: float = 0.2
    top: float | None = None
    value: float = 1.0
    offset: float = 0.5
    slope: float = 0.1
    waive_ellipticity: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown coefficient map kind {self.kind!r}; choose from {_KINDS}")
        if not (0.0 < self.lam < 1.0):
            raise ConfigError(f"ellipticity floor must lie in (0, 1), got {self.lam}")
        if self.kind == "linear" and not self.waive_ellipticity:
            raise ConfigError("the linear map is test-only and needs waive_ellipticity=True")
        if not self.waive_ellipticity:
            self.certify()

    @property
    def upper(self) -> float:
        if self.top is not None:
            return self.top
        if self.kind == "nonsymmetric-with-skew-part":
            return float(np.sqrt(max(1.0 - self.skew**2, 0.0)))
        return 1.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @cached_property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def is_symmetric(self) -> bool:
        return self.kind != "nonsymmetric-with-skew-part" or self.skew == 0.0

    # --- evaluation -------------------------------------------------------

    def __call__(self, g: np.ndarray, d: int) -> np.ndarray:
        """``a0(g)`` with ``g`` of shape ``(kappa, ...)``; returns ``(d, d, ...)``."""
        return self._eval(g, d, order=0)

    def derivative(self, g: np.ndarray, d: int, order: int = 1) -> np.ndarray:
        """Partial derivatives per channel: shape ``(kappa, d, d, ...)``."""
        return self._eval(g, d, order=order)

    def _eval(self, g, d, order):
        g = np.asarray(g, dtype=float)
        kap = g.shape[0]
        sp = g.shape[1:]
        sfun = (_sig, _dsig, _ddsig)[order]
        fac = self.gain**order
        if order == 0:
            out = np.zeros((d, d) + sp)
        else:
            out = np.zeros((kap, d, d) + sp)

        def put(ch, i, j, val):
            if order == 0:
                out[i, j] += val
            else:
                out[ch, i, j] += val

        lam = self.lam
        if self.kind == "clipped-sigmoid-isotropic":
            s = sfun(self.gain * g[0])
            for i in range(d):
                put(0, i, i, (lam if order == 0 else 0.0) + (1 - lam) * fac * s)
        elif self.kind == "diagonal-anisotropic":
            for i in range(d):
                ch = i % kap
                sign = (-1.0) ** i
                s = sfun(sign * self.gain * g[ch]) * sign**order
                put(ch, i, i, (lam if order == 0 else 0.0) + (1 - lam) * fac * s)
        elif self.kind == "nonsymmetric-with-skew-part":
            s = sfun(self.gain * g[0]) * fac
            for i in range(d):
                put(0, i, i, (lam if order == 0 else 0.0) + (self.upper - lam) * s)
            if d >= 2:
                put(0, 0, 1, self.skew * s)
                put(0, 1, 0, -self.skew * s)
        elif self.kind == "linear":
            for i in range(d):
                if order == 0:
                    put(0, i, i, self.offset + self.slope * g[0])
                elif order == 1:
                    put(0, i, i, self.slope + 0.0 * g[0])
        elif self.kind == "constant":
            if order == 0:
                for i in range(d):
                    put(0, i, i, self.value + 0.0 * g[0])
        return out

    # --- certificate -------------------------------------------------------

    def certify(self, d: int = 3, samples: int = 401) -> dict:
        """Check ``|a0 xi| <= |xi|`` and ``xi . a0 xi >= lam |xi|^2`` over all channel values.

        Every builtin depends on ``g`` through ``tanh`` of each channel, so the
        check sweeps ``tanh`` values over ``[-1, 1]`` (limits included) per
        channel. Raises :class:`EllipticityError` with a violating vector.
        """
        if self.kind == "constant":
            mats = [(np.array([self.value]), self.value * np.eye(d))]
        else:
            # recover g from tanh values; endpoints map to +-inf limits
            tv = np.linspace(-1.0, 1.0, samples)
            with np.errstate(divide="ignore"):
                gv = np.arctanh(np.clip(tv, -1 + 1e-16, 1 - 1e-16)) / self.gain
            kap = d if self.kind == "diagonal-anisotropic" else 1
            if kap == 1:
                grid = gv[None, :]
            else:
                coarse = gv[:: max(1, samples // 41)]
                mesh = np.meshgrid(*[coarse] * kap, indexing="ij")
                grid = np.stack([m.ravel() for m in mesh])
            a = self(grid, d)
            mats = [(grid[:, n], a[:, :, n]) for n in range(grid.shape[1])]
        worst = {"lower": np.inf, "upper": 0.0}
        for gval, M in mats:
            sym = 0.5 * (M + M.T)
            w, V = np.linalg.eigh(sym)
            if w[0] < self.lam - 1e-12:
                raise EllipticityError(
                    f"ellipticity fails: xi.a0 xi = {w[0]:.6g} |xi|^2 < lam = {self.lam}",
                    {"g": np.asarray(gval).tolist(), "xi": V[:, 0].tolist()})
            U, S, Vt = np.linalg.svd(M)
            if S[0] > 1.0 + 1e-12:
                raise EllipticityError(
                    f"boundedness fails: |a0 xi| = {S[0]:.6g} |xi| > |xi|",
                    {"g": np.asarray(gval).tolist(), "xi": Vt[0].tolist()})
            worst["lower"] = min(worst["lower"], float(w[0]))
            worst["upper"] = max(worst["upper"], float(S[0]))
        return worst


@dataclass
class CoefficientField:
    """Cell-centred coefficient matrices with an ellipticity certificate."""

    grid: TorusGrid
    a: np.ndarray = field(repr=False)
    lam: float
    adjoint: bool = False
    certificate: dict = field(default_factory=dict)
    spec: CoefficientMapSpec | None = None
    seed: int | None = None

    @property
    def d(self) -> int:
        return self.grid.d

    def transpose(self) -> "CoefficientField":
        return CoefficientField(self.grid, np.swapaxes(self.a, 0, 1), self.lam,
                                not self.adjoint, self.certificate, self.spec, self.seed)

    @cached_property
    def operator(self) -> FluxOperator:
        return FluxOperator(self.a)

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.a, np.swapaxes(self.a, 0, 1)))

    def is_constant(self) -> bool:
        flat = self.a.reshape(self.d, self.d, -1)
        return bool(np.all(flat == flat[:, :, :1]))


def _certificate(a: np.ndarray, lam: float) -> dict:
    d = a.shape[0]
    mats = np.moveaxis(a.reshape(d, d, -1), 2, 0)
    sym = 0.5 * (mats + np.swapaxes(mats, 1, 2))
    lo = float(np.linalg.eigvalsh(sym)[:, 0].min())
    hi = float(np.linalg.norm(mats, ord=2, axis=(1, 2)).max())
    return {"min_sym_eig": lo, "max_norm": hi, "lam": lam,
            "ok": bool(lo >= lam - 1e-12 and hi <= 1.0 + 1e-12)}


def coefficient_from_field(G: GaussianFieldSample, spec: CoefficientMapSpec) -> CoefficientField:
    """Apply ``a0`` pointwise and record the ellipticity certificate of the sample."""
    a = spec(G.values, G.grid.d)
    cert = _certificate(a, spec.lam)
    if not cert["ok"] and not spec.waive_ellipticity:
        raise EllipticityError(f"sample violates ellipticity bounds: {cert}")
    return CoefficientField(G.grid, a, spec.lam, False, cert, spec, G.seed)


def constant_coefficient(grid: TorusGrid, value: float | np.ndarray = 1.0,
                         lam: float | None = None) -> CoefficientField:
    """Spatially constant coefficient ``value * Id`` (or a constant matrix)."""
    d = grid.d
    M = value * np.eye(d) if np.isscalar(value) else np.asarray(value, float)
    a = np.broadcast_to(M.reshape(d, d, *([1] * d)), (d, d) + grid.shape).copy()
    cert = _certificate(a[(slice(None), slice(None)) + (slice(0, 1),) * d], 0.0)
    lam = cert["min_sym_eig"] if lam is None else lam
    cert["lam"] = lam
    return CoefficientField(grid, a, lam, False, cert, None, None)


def sample_coefficient(grid: TorusGrid, kernel: KernelC0, spec: CoefficientMapSpec,
                       seed: int, kappa: int = 1, method: str = "auto",
                       noise: WhiteNoiseSample | None = None,
                       ) -> tuple[CoefficientField, GaussianFieldSample]:
    """Noise, field and coefficient in one call (``noise`` overrides sampling)."""
    if noise is None:
        noise = sample_white_noise(grid, kappa, seed)
    G = build_gaussian_field(noise, kernel, method)
    return coefficient_from_field(G, spec), G

