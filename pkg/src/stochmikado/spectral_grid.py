"""Periodic fields on the unit torus and the spectral primitives built on them.

Fields are sampled at x_i = i/n on every axis.  Fourier coefficients use the
normalisation f_hat(k) = mean(f(x) exp(-2 pi i k.x)), stored in the real-FFT
half layout, so the zero coefficient is the mean of the field.

Derivatives multiply by 2 pi i k with the Nyquist wavenumber set to zero.  The
Laplacian uses the same wavenumbers, so divergence(gradient(f)) equals
laplacian(f) to rounding for every grid field.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy import integrate


class GridMismatchError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


class UnsupportedExponentError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    d: int = 2
    n: int = 256
    n_t: int = 512

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"dimension must be at least 2, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if self.n_t < 8:
            raise ValueError(f"n_t must be >= 8, got {self.n_t}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def dt(self) -> float:
        return 1.0 / (self.n_t - 1)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def rshape(self) -> tuple:
        return (self.n,) * (self.d - 1) + (self.n // 2 + 1,)

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_t)

    @cached_property
    def coords(self) -> tuple:
        x = np.arange(self.n) / self.n
        out = []
        for axis in range(self.d):
            shp = [1] * self.d
            shp[axis] = self.n
            out.append(x.reshape(shp))
        return tuple(out)

    def _wavenumbers(self, zero_nyquist: bool) -> tuple:
        full = np.fft.fftfreq(self.n, 1.0 / self.n)
        half = np.fft.rfftfreq(self.n, 1.0 / self.n)
        if zero_nyquist:
            full = np.where(np.abs(full) == self.n // 2, 0.0, full)
            half = np.where(half == self.n // 2, 0.0, half)
        out = []
        for axis in range(self.d):
            shp = [1] * self.d
            shp[axis] = -1
            k = half if axis == self.d - 1 else full
            out.append(k.reshape(shp))
        return tuple(out)

    @cached_property
    def wavenumbers(self) -> tuple:
        return self._wavenumbers(zero_nyquist=False)

    @cached_property
    def deriv_wavenumbers(self) -> tuple:
        return self._wavenumbers(zero_nyquist=True)

    @cached_property
    def ksq(self) -> np.ndarray:
        """|k|^2 over the derivative wavenumbers (Nyquist removed)."""
        return sum(k * k for k in self.deriv_wavenumbers)

    @cached_property
    def ksq_full(self) -> np.ndarray:
        return sum(k * k for k in self.wavenumbers)

    @cached_property
    def kinf(self) -> np.ndarray:
        """max_i |k_i| for every stored coefficient."""
        out = np.zeros(self.rshape)
        for k in self.wavenumbers:
            out = np.maximum(out, np.abs(k))
        return out

    @cached_property
    def parseval_weights(self) -> np.ndarray:
        # interior half-axis coefficients stand for a conjugate pair
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        shp = [1] * (self.d - 1) + [-1]
        return np.broadcast_to(w.reshape(shp), self.rshape)

    def check_same(self, other: "GridSpec") -> None:
        if self != other:
            raise GridMismatchError(f"fields live on different grids: {self} vs {other}")

    def header(self) -> dict:
        return {"d": self.d, "n": self.n, "n_t": self.n_t}


def _rfft(values: np.ndarray, d: int) -> np.ndarray:
    axes = tuple(range(values.ndim - d, values.ndim))
    size = values.shape[-1] ** d
    return np.fft.rfftn(values, axes=axes) / size


def _irfft(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    axes = tuple(range(coeffs.ndim - grid.d, coeffs.ndim))
    return np.fft.irfftn(coeffs * grid.n ** grid.d, s=grid.shape, axes=axes)


class _FieldBase:
    __slots__ = ("grid", "values", "_spectral")

    def __init__(self, grid: GridSpec, values, copy: bool = True):
        arr = np.array(values, dtype=float) if copy else np.asarray(values, dtype=float)
        expected = self._expected_shape(grid)
        if arr.shape != expected:
            raise GridMismatchError(f"values have shape {arr.shape}, grid expects {expected}")
        arr.flags.writeable = False
        self.grid = grid
        self.values = arr
        self._spectral = None

    @classmethod
    def _expected_shape(cls, grid):
        raise NotImplementedError

    @property
    def spectral(self) -> np.ndarray:
        if self._spectral is None:
            coeffs = _rfft(self.values, self.grid.d)
            coeffs.flags.writeable = False
            self._spectral = coeffs
        return self._spectral

    def _wrap(self, values):
        return type(self)(self.grid, values, copy=False)

    def _other_values(self, other):
        if isinstance(other, _FieldBase):
            self.grid.check_same(other.grid)
            if isinstance(other, ScalarField) and isinstance(self, VectorField):
                return other.values[None]
            if isinstance(other, VectorField) and isinstance(self, ScalarField):
                raise TypeError("scalar op vector: put the vector on the left")
            return other.values
        return other

    def __add__(self, other):
        return self._wrap(self.values + self._other_values(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.values - self._other_values(other))

    def __rsub__(self, other):
        return self._wrap(self._other_values(other) - self.values)

    def __mul__(self, other):
        if isinstance(other, VectorField) and isinstance(self, ScalarField):
            return other * self
        return self._wrap(self.values * self._other_values(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._wrap(self.values / self._other_values(other))

    def __neg__(self):
        return self._wrap(-self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


class ScalarField(_FieldBase):
    __slots__ = ()

    @classmethod
    def _expected_shape(cls, grid):
        return grid.shape

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape), copy=False)

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)), copy=False)

    @classmethod
    def from_function(cls, grid: GridSpec, fn: Callable) -> "ScalarField":
        vals = np.broadcast_to(fn(*grid.coords), grid.shape)
        return cls(grid, vals)

    @classmethod
    def from_spectral(cls, grid: GridSpec, coeffs: np.ndarray) -> "ScalarField":
        return cls(grid, _irfft(coeffs, grid), copy=False)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


class VectorField(_FieldBase):
    __slots__ = ()

    @classmethod
    def _expected_shape(cls, grid):
        return (grid.d,) + grid.shape

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls(grid, np.zeros((grid.d,) + grid.shape), copy=False)

    @classmethod
    def from_components(cls, comps: Sequence[ScalarField]) -> "VectorField":
        grid = comps[0].grid
        for c in comps:
            grid.check_same(c.grid)
        if len(comps) != grid.d:
            raise GridMismatchError(f"need {grid.d} components, got {len(comps)}")
        return cls(grid, np.stack([c.values for c in comps]), copy=False)

    @classmethod
    def from_spectral(cls, grid: GridSpec, coeffs: np.ndarray) -> "VectorField":
        return cls(grid, _irfft(coeffs, grid), copy=False)

    @property
    def components(self) -> tuple:
        return tuple(ScalarField(self.grid, v, copy=False) for v in self.values)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i], copy=False)

    @property
    def mean(self) -> np.ndarray:
        return self.values.reshape(self.grid.d, -1).mean(axis=1)

    def dot(self, other: "VectorField") -> ScalarField:
        self.grid.check_same(other.grid)
        return ScalarField(self.grid, np.einsum("i...,i...->...", self.values, other.values), copy=False)

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values ** 2, axis=0))


Field = Union[ScalarField, VectorField]


# ---------------------------------------------------------------- norms

def _abs_values(f: Field) -> np.ndarray:
    if isinstance(f, VectorField):
        return f.pointwise_norm()
    return np.abs(f.values)


def lebesgue_norm(f: Field, r: float) -> float:
    """Uniform-grid quadrature of |f|^r; vector fields use the Euclidean length."""
    if not (r == math.inf or r >= 1):
        raise UnsupportedExponentError(f"L^r needs r >= 1, got {r}")
    a = _abs_values(f)
    if r == math.inf:
        return float(a.max())
    if r == 1:
        return float(a.mean())
    if r == 2:
        return float(math.sqrt(np.mean(a * a)))
    scale = float(a.max())
    if scale == 0.0:
        return 0.0
    return scale * float(np.mean((a / scale) ** r)) ** (1.0 / r)


def sobolev_multiplier(grid: GridSpec, theta: float) -> np.ndarray:
    return (1.0 + 4.0 * math.pi ** 2 * grid.ksq_full) ** (theta / 2.0)


def sobolev_norm(f: Field, theta: float, r: float) -> float:
    """Bessel-potential norm: multiplier (1 + 4 pi^2 |k|^2)^(theta/2), summed over components."""
    if not (1 < r < math.inf):
        raise UnsupportedExponentError(f"W^(theta,r) needs 1 < r < inf, got {r}")
    if not 0 <= theta <= 1:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    g = f.grid
    if theta == 0:
        comps = f.components if isinstance(f, VectorField) else (f,)
        return sum(lebesgue_norm(c, r) for c in comps)
    lifted = _irfft(f.spectral * sobolev_multiplier(g, theta), g)
    if isinstance(f, VectorField):
        return sum(lebesgue_norm(ScalarField(g, v, copy=False), r) for v in lifted)
    return lebesgue_norm(ScalarField(g, lifted, copy=False), r)


def c1_norm(f: ScalarField) -> float:
    return f.max_abs() + float(gradient(f).pointwise_norm().max())


# ---------------------------------------------------------------- derivatives

def derivative(f: Field, axis: int) -> Field:
    g = f.grid
    k = g.deriv_wavenumbers[axis]
    return type(f).from_spectral(g, f.spectral * (2j * math.pi * k))


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    spec = f.spectral
    coeffs = np.stack([spec * (2j * math.pi * k) for k in g.deriv_wavenumbers])
    return VectorField.from_spectral(g, coeffs)


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    spec = v.spectral
    total = sum(spec[i] * (2j * math.pi * k) for i, k in enumerate(g.deriv_wavenumbers))
    return ScalarField.from_spectral(g, total)


def laplacian(f: Field) -> Field:
    g = f.grid
    return type(f).from_spectral(g, f.spectral * (-4.0 * math.pi ** 2 * g.ksq))


def bandwidth(f: Field, tol: float = 1e-12) -> int:
    """Largest |k|_inf carrying a coefficient above tol times the largest one."""
    spec = np.abs(f.spectral)
    if spec.ndim > f.grid.d:
        spec = spec.max(axis=0)
    top = spec.max()
    if top == 0:
        return 0
    active = spec > tol * top
    return int(f.grid.kinf[active].max())


def dilate(f: Field, lam: int, tol: float = 1e-12) -> Field:
    """f(lam x) for a positive integer lam.

    On the grid this is the exact index map i -> lam*i mod n, which coincides
    with sending coefficient k to lam*k whenever lam * bandwidth < n/2.
    """
    lam = int(lam)
    if lam < 1:
        raise ValueError("dilation factor must be a positive integer")
    if lam == 1:
        return f
    g = f.grid
    bw = bandwidth(f, tol)
    if lam * bw >= g.n // 2:
        raise ResolutionError(f"dilation by {lam} of bandwidth {bw} aliases on n={g.n}")
    idx = (lam * np.arange(g.n)) % g.n
    vals = f.values
    lead = vals.ndim - g.d
    for axis in range(g.d):
        vals = np.take(vals, idx, axis=lead + axis)
    return type(f)(g, vals, copy=False)


def translate(f: Field, y) -> Field:
    """(f o tau_y)(x) = f(x - y) for any real shift y."""
    g = f.grid
    y = np.broadcast_to(np.asarray(y, dtype=float), (g.d,))
    if not np.any(y):
        return f
    steps = y * g.n
    if np.allclose(steps, np.round(steps), rtol=0, atol=1e-12):
        lead = f.values.ndim - g.d
        shift = tuple(int(round(s)) for s in steps)
        vals = np.roll(f.values, shift, axis=tuple(range(lead, lead + g.d)))
        return type(f)(g, vals, copy=False)
    phase = np.exp(-2j * math.pi * sum(k * yi for k, yi in zip(g.deriv_wavenumbers, y)))
    return type(f).from_spectral(g, f.spectral * phase)


# ---------------------------------------------------------------- time fields

class TimeField:
    """A field-valued function of t in [0, 1].

    `evaluator(t)` returns the field at t.  When `shifted(t, y)` is supplied it
    must return the field at time t evaluated at x + y; otherwise the shift is
    done spectrally.  A separable field a(t) * F(x) records its time profile so
    that time convolutions can be done by one-dimensional quadrature.
    """

    def __init__(self, grid: GridSpec, evaluator: Callable, *, shifted: Callable | None = None,
                 profile: tuple | None = None, cache_size: int = 0, grid_sampled: bool = False,
                 grid_cache_bytes: float = 2.5e8):
        self.grid = grid
        self._eval = evaluator
        self._shifted = shifted
        self.profile = profile  # (a, a_dot, F) for separable fields
        self._cache_size = cache_size
        self._cache: dict = {}
        self.parts: tuple = ()  # separable summands, when built by `sum_of_separable`
        # time convolutions of a grid-sampled field interpolate linearly between time-grid samples
        self.grid_sampled = grid_sampled
        self._grid_cache: OrderedDict = OrderedDict()
        self._grid_cache_bytes = grid_cache_bytes

    def __call__(self, t: float) -> Field:
        t = float(t)
        if self.grid_sampled:
            k = int(round(t / self.grid.dt))
            if abs(k * self.grid.dt - t) < 1e-12:
                return self.at_grid(k)
        if self._cache_size:
            hit = self._cache.get(t)
            if hit is not None:
                return hit
        val = self._eval(t)
        if self._cache_size:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[t] = val
        return val

    def at_grid(self, k: int) -> Field:
        """Field at the k-th time-grid point, kept in a byte-bounded LRU cache."""
        hit = self._grid_cache.get(k)
        if hit is not None:
            self._grid_cache.move_to_end(k)
            return hit
        val = self._eval(float(self.grid.times[k]))
        self._grid_cache[k] = val
        used = len(self._grid_cache) * val.values.nbytes
        while used > self._grid_cache_bytes and len(self._grid_cache) > 1:
            self._grid_cache.popitem(last=False)
            used -= val.values.nbytes
        return val

    def at_shift(self, t: float, y) -> Field:
        """Field at time t evaluated at x + y."""
        y = np.asarray(y, dtype=float)
        if self._shifted is not None:
            return self._shifted(float(t), y)
        return translate(self(t), -y)

    @property
    def sample_times(self) -> np.ndarray:
        return self.grid.times

    def samples(self, times=None) -> list:
        times = self.grid.times if times is None else times
        return [self(t) for t in times]

    @classmethod
    def constant(cls, field: Field) -> "TimeField":
        return cls(field.grid, lambda t: field,
                   profile=(lambda t: 1.0, lambda t: 0.0, field))

    @classmethod
    def separable(cls, a: Callable, a_dot: Callable, field: Field) -> "TimeField":
        return cls(field.grid, lambda t: field * float(a(t)), profile=(a, a_dot, field))

    @classmethod
    def sum_of_separable(cls, terms: Sequence[tuple]) -> "TimeField":
        """sum_i a_i(t) F_i(x) from (a, a_dot, F) triples."""
        parts = tuple(cls.separable(*term) for term in terms)
        if len(parts) == 1:
            return parts[0]

        def evaluator(t):
            return sum((p(t) for p in parts[1:]), parts[0](t))

        out = cls(parts[0].grid, evaluator)
        out.parts = parts
        return out

    @classmethod
    def from_samples(cls, fields: Sequence[Field], times=None) -> "TimeField":
        grid = fields[0].grid
        times = np.asarray(grid.times if times is None else times, dtype=float)
        stack = np.stack([f.values for f in fields])
        kind = type(fields[0])

        def evaluator(t):
            t = min(max(t, times[0]), times[-1])
            i = int(np.searchsorted(times, t, side="right")) - 1
            i = min(max(i, 0), len(times) - 2)
            w = (t - times[i]) / (times[i + 1] - times[i])
            return kind(grid, (1 - w) * stack[i] + w * stack[i + 1], copy=False)

        return cls(grid, evaluator)

    def map(self, fn: Callable) -> "TimeField":
        return TimeField(self.grid, lambda t: fn(self(t)))


def time_bump(u):
    """Smooth bump supported in (0, 1), not normalised."""
    u = np.asarray(u, dtype=float)
    z = 2.0 * u - 1.0
    inside = np.abs(z) < 1
    out = np.zeros_like(z)
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


def time_bump_dot(u):
    u = np.asarray(u, dtype=float)
    z = 2.0 * u - 1.0
    inside = np.abs(z) < 1
    out = np.zeros_like(z)
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi ** 2)) * (-2.0 * zi / (1.0 - zi ** 2) ** 2) * 2.0
    return out


BUMP_MASS = integrate.quad(lambda u: float(time_bump(u)), 0.0, 1.0, epsabs=1e-15, epsrel=1e-12, limit=200)[0]


@dataclass(frozen=True)
class MollifierKernel:
    """Product kernel: a one-sided time bump on (0, 1) and a radial space bump of radius 1.

    `n_quad` Gauss-Legendre nodes carry the time convolution of non-separable fields.
    """
    n_quad: int = 48

    def time_weights(self, eps: float, derivative: bool = False):
        nodes, weights = np.polynomial.legendre.leggauss(self.n_quad)
        u = 0.5 * (nodes + 1.0)
        w = 0.5 * weights
        if derivative:
            vals = w * time_bump_dot(u) / BUMP_MASS / eps
            vals -= vals.sum() * w / w.sum()  # kernel derivative integrates to zero
        else:
            vals = w * time_bump(u)
            vals /= vals.sum()
        return u * eps, vals

    def space_multiplier(self, grid: GridSpec, eps: float) -> np.ndarray:
        return _space_multiplier(grid, float(eps))


_MULT_CACHE: dict = {}


def _space_multiplier(grid: GridSpec, eps: float) -> np.ndarray:
    key = (grid.d, grid.n, eps)
    hit = _MULT_CACHE.get(key)
    if hit is not None:
        return hit
    # periodic distance to the origin on every axis
    r2 = 0.0
    for x in grid.coords:
        dx = np.minimum(x, 1.0 - x)
        r2 = r2 + dx * dx
    q = np.broadcast_to(r2, grid.shape) / eps ** 2
    kern = np.where(q < 1, np.exp(-1.0 / np.maximum(1.0 - q, 1e-300)), 0.0)
    kern /= kern.sum()
    mult = np.fft.rfftn(kern)
    mult.flags.writeable = False
    if len(_MULT_CACHE) > 64:
        _MULT_CACHE.clear()
    _MULT_CACHE[key] = mult
    return mult


def mollify_space(f: Field, eps: float, kernel: MollifierKernel | None = None) -> Field:
    if eps <= 0:
        return f
    kernel = kernel or MollifierKernel()
    return type(f).from_spectral(f.grid, f.spectral * kernel.space_multiplier(f.grid, eps))


def mollify_space_time(F: TimeField, eps: float, kernel: MollifierKernel | None = None,
                       tau: float = 1.0, derivative: bool = False) -> TimeField:
    """One-sided space-time mollification (past values only).

    F is frozen at F(0) before time 0 and at F(tau) after tau.  With
    `derivative=True` the result is the time derivative, obtained from the
    differentiated time kernel.
    """
    kernel = kernel or MollifierKernel()
    g = F.grid
    if eps < 2.0 * g.h:
        raise ResolutionError(f"mollification scale {eps} is below two grid cells (h={g.h})")

    def frozen(s):
        return min(max(s, 0.0), tau)

    if F.parts:
        pieces = [mollify_space_time(p, eps, kernel, tau, derivative) for p in F.parts]
        return TimeField(g, lambda t: sum((p(t) for p in pieces[1:]), pieces[0](t)), cache_size=8)

    if F.profile is not None:
        a, _, base = F.profile
        base_eps = mollify_space(base, eps, kernel)
        kern = time_bump_dot if derivative else time_bump
        scale = 1.0 / (BUMP_MASS * (eps if derivative else 1.0))

        def a_eps(t):
            def integrand(u):
                return float(a(frozen(t - eps * u))) * float(kern(u))
            with warnings.catch_warnings():
                # the tolerances sit at roundoff; quad reports that but the value is fine
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                val = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
            return val * scale

        def evaluator(t):
            return base_eps * a_eps(t)

        profile = None if derivative else (a_eps, None, base_eps)
        return TimeField(g, evaluator, profile=profile, cache_size=8)

    offsets, weights = kernel.time_weights(eps, derivative=derivative)
    mult = kernel.space_multiplier(g, eps)

    if F.grid_sampled:
        dt, last = g.dt, g.n_t - 1

        def evaluator(t):
            hat = {}
            for s, w in zip(offsets, weights):
                x = frozen(t - s) / dt
                k = min(int(math.floor(x)), last - 1)
                frac = x - k
                hat[k] = hat.get(k, 0.0) + w * (1.0 - frac)
                hat[k + 1] = hat.get(k + 1, 0.0) + w * frac
            acc, kind = None, ScalarField
            for k, w in sorted(hat.items()):
                if w == 0.0:
                    continue
                val = F.at_grid(k)
                kind = type(val)
                acc = val.values * w if acc is None else acc + val.values * w
            raw = kind(g, acc, copy=False)
            return kind.from_spectral(g, raw.spectral * mult)

        return TimeField(g, evaluator, cache_size=8)

    def evaluator(t):
        acc = None
        kind = ScalarField
        for s, w in zip(offsets, weights):
            if w == 0.0:
                continue
            val = F(frozen(t - s))
            kind = type(val)
            acc = val.values * w if acc is None else acc + val.values * w
        raw = kind(g, acc, copy=False)
        return kind.from_spectral(g, raw.spectral * mult)

    return TimeField(g, evaluator, cache_size=8)


# ---------------------------------------------------------------- improved Hoelder

@dataclass
class HolderReport:
    lam: int
    r: float
    lhs: float
    main: float
    excess: float
    scale: float  # lam^(-1/r) ||f||_C1 ||g||_Lr
    C: float | None = None

    @property
    def rhs(self) -> float:
        return self.main + (self.C or 0.0) * self.scale

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-14


def improved_holder_check(f: ScalarField, g: ScalarField, lam: int, r: float,
                          C: float | None = None) -> HolderReport:
    """Compare ||f g(lam .)||_r with ||f||_r ||g||_r plus the lam^(-1/r) correction."""
    f.grid.check_same(g.grid)
    g_lam = dilate(g, lam)
    lhs = lebesgue_norm(f * g_lam, r)
    gnorm = lebesgue_norm(g, r)
    main = lebesgue_norm(f, r) * gnorm
    scale = lam ** (-1.0 / r) * c1_norm(f) * gnorm
    return HolderReport(lam=lam, r=r, lhs=lhs, main=main, excess=lhs - main, scale=scale, C=C)


def fit_holder_constant(reports: Sequence[HolderReport]) -> float:
    """Smallest C making every report's inequality hold."""
    return max(0.0, max(rep.excess / rep.scale for rep in reports if rep.scale > 0))


# ---------------------------------------------------------------- sampling helpers

def random_bandlimited(grid: GridSpec, rng: np.random.Generator, kmax: int = 4,
                       mean_zero: bool = False, decay: float = 1.0) -> ScalarField:
    """Random real trig polynomial with |k|_inf <= kmax and amplitudes ~ (1+|k|)^-decay."""
    if 2 * kmax >= grid.n // 2:
        raise ResolutionError("random field bandwidth too large for grid")
    mask = grid.kinf <= kmax
    amp = (1.0 + np.sqrt(grid.ksq_full)) ** (-decay)
    coeffs = (rng.standard_normal(grid.rshape) + 1j * rng.standard_normal(grid.rshape)) * amp * mask
    if mean_zero:
        coeffs.flat[0] = 0.0
    field = ScalarField.from_spectral(grid, coeffs)
    return ScalarField(grid, field.values / max(field.max_abs(), 1e-300), copy=False)


# ---------------------------------------------------------------- dumps

def dump_field(f: Field, path, fmt: str = "npy") -> Path:
    """Row-major dump with the grid as header; csv holds one component per column."""
    path = Path(path)
    header = dict(f.grid.header(), kind=type(f).__name__)
    if fmt == "csv":
        if isinstance(f, VectorField):
            cols = f.values.reshape(f.grid.d, -1).T
        else:
            cols = f.values.reshape(-1, 1)
        np.savetxt(path, cols, delimiter=",", header=json.dumps(header))
    else:
        with open(path, "wb") as fh:
            np.save(fh, f.values)
        path.with_suffix(".json").write_text(json.dumps(header))
    return path


def load_field(path) -> Field:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path) as fh:
            header = json.loads(fh.readline().lstrip("# ").strip())
        cols = np.loadtxt(path, delimiter=",", ndmin=2)
        grid = GridSpec(header["d"], header["n"], header["n_t"])
        if header["kind"] == "VectorField":
            return VectorField(grid, cols.T.reshape((grid.d,) + grid.shape))
        return ScalarField(grid, cols[:, 0].reshape(grid.shape))
    header = json.loads(path.with_suffix(".json").read_text())
    grid = GridSpec(header["d"], header["n"], header["n_t"])
    vals = np.load(path)
    kind = VectorField if header["kind"] == "VectorField" else ScalarField
    return kind(grid, vals)
