"""Concentrated blobs sliced against periodic Mikado profiles.

For a direction j (0-based) and parameters (lam, mu, sigma, nu):

    blob_j(x)    = mu^e phi(mu * frac(lam (x - sigma t e_j) - zeta_j))
    Theta^j      = blob_j[e = d/s]  * psi_j(nu x)
    W^j          = blob_j[e = d/s'] * psi_j(nu x) e_j
    Q^j          = blob_j[d/s] blob_j[d/s'] psi_j(nu x)^2 / sigma
    W^{j,corr}   = (1/nu) [(b_j . grad F) e_j - (d_j F) b_j](nu x),   F = blob_j[d/s']
    A^j_N        = sigma * R_N(d_j blob_j[d/s], psi_j(nu .))

with psi_j(y) = sqrt(2) cos(2 pi y_m), b_j(y) = sqrt(2)/(2 pi) sin(2 pi y_m) e_m and
m = 1 for j = 0, m = 0 otherwise.  Every block is evaluated pointwise in
closed form; only A^j_N goes through the spectral antidivergence.

The profile phi(y) = c exp(-a / (1 - |y - P|^2 / r^2)) is sharper than the
textbook bump so that its Fourier transform falls below 1e-10 at moderate
wavenumbers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .antidivergence import fit_loglog, improved_antidiv
from .spectral_grid import (GridSpec, ResolutionError, ScalarField, VectorField, derivative,
                            divergence, lebesgue_norm)


def _line_lattice_distance(v: np.ndarray, i: int, j: int) -> float:
    """Distance from the line v + s (e_j - e_i) to the integer lattice."""
    frac = np.abs(v - np.round(v))
    rest = sum(frac[m] ** 2 for m in range(len(v)) if m not in (i, j))
    c = v[i] + v[j]
    return math.sqrt(rest + (c - round(c)) ** 2 / 2.0)


def shift_separation(shifts: Sequence[Sequence[float]]) -> float:
    d = len(shifts)
    best = math.inf
    for i, j in itertools.combinations(range(d), 2):
        v = np.asarray(shifts[j], float) - np.asarray(shifts[i], float)
        best = min(best, _line_lattice_distance(v, i, j))
    return best


def staggered_shifts(d: int) -> tuple:
    """Shifts zeta_j maximising the smallest tube separation over a quarter lattice."""
    if d == 2:
        return ((0.0, 0.0), (0.5, 0.0))
    cands = list(itertools.product((0.0, 0.25, 0.5, 0.75), repeat=d))
    chosen = [cands[0]]
    for _ in range(1, d):
        best, best_sep = None, -1.0
        for c in cands:
            if c in chosen:
                continue
            sep = shift_separation(chosen + [c]) if len(chosen) + 1 > 1 else math.inf
            if sep > best_sep + 1e-12:
                best, best_sep = c, sep
        chosen.append(best)
    return tuple(tuple(float(x) for x in c) for c in chosen)


@dataclass(frozen=True)
class BlobProfile:
    d: int = 2
    radius: float = 0.17
    sharpness: float = 24.0
    shifts: tuple = field(default=None)

    def __post_init__(self):
        if not 0 < self.radius < 0.5:
            raise ValueError("blob radius must lie in (0, 1/2)")
        if self.shifts is None:
            object.__setattr__(self, "shifts", staggered_shifts(self.d))
        if len(self.shifts) != self.d:
            raise ValueError("need one shift per direction")
        if shift_separation(self.shifts) <= 2 * self.radius:
            raise ValueError(
                f"shifts separate tubes by {shift_separation(self.shifts):.4f}, "
                f"need more than the blob diameter {2 * self.radius:.4f}")

    @property
    def center(self) -> float:
        return 0.5

    def _radial(self, rho):
        q = (np.asarray(rho, float) / self.radius) ** 2
        out = np.zeros_like(q)
        ok = q < 1
        out[ok] = np.exp(-self.sharpness / (1.0 - q[ok]))
        return out

    @cached_property
    def norm_const(self) -> float:
        d = self.d
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        val = integrate.quad(lambda p: self._radial(p) ** 2 * p ** (d - 1), 0.0, self.radius,
                             epsabs=0, epsrel=1e-13, limit=400)[0]
        return 1.0 / math.sqrt(area * val)

    def radial_transform(self, xi: np.ndarray, power: int = 1, nodes: int = 1200) -> np.ndarray:
        """Fourier transform of phi^power as a function of |xi|."""
        d = self.d
        x, w = np.polynomial.legendre.leggauss(nodes)
        rho = 0.5 * self.radius * (x + 1)
        w = 0.5 * self.radius * w
        prof = (self.norm_const * self._radial(rho)) ** power
        xi = np.atleast_1d(np.asarray(xi, float))
        nu = d / 2 - 1
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        out = np.empty_like(xi)
        for lo in range(0, len(xi), 256):
            k = xi[lo:lo + 256, None]
            safe = np.where(k == 0, 1.0, k)
            arg = 2 * math.pi * safe * rho[None, :]
            vals = 2 * math.pi * safe[:, 0] ** (-nu) * np.sum(w * prof * special.jv(nu, arg) * rho ** (nu + 1), axis=1)
            zero = k[:, 0] == 0
            vals[zero] = area * np.sum(w * prof * rho ** (d - 1))
            out[lo:lo + 256] = vals
        return out

    def spectral_extent(self, tol: float, power: int = 1, kmax: float = 300.0) -> float:
        """Smallest K with |F(phi^power)(xi)| <= tol F(phi^power)(0) for all |xi| >= K."""
        return _spectral_extent(self, float(tol), int(power), float(kmax))

    def evaluate(self, z: Sequence[np.ndarray], order: int = 0):
        """phi and its derivatives at points z (components broadcastable, each in [0, 1))."""
        c = self.norm_const
        r2 = self.radius ** 2
        dz = [zi - self.center for zi in z]
        q = sum(di * di for di in dz) / r2
        inside = q < 1
        one_m = np.where(inside, 1.0 - q, 1.0)
        g = np.where(inside, np.exp(-self.sharpness / one_m), 0.0) * c
        if order == 0:
            return g, None, None
        a = self.sharpness
        g1 = -a / one_m ** 2 * g  # dg/dq
        grad = [g1 * 2 * di / r2 for di in dz]
        if order == 1:
            return g, grad, None
        g2 = (a * a / one_m ** 4 - 2 * a / one_m ** 3) * g
        hess = [[g2 * 4 * dz[i] * dz[k] / r2 ** 2 + (g1 * 2 / r2 if i == k else 0.0)
                 for k in range(len(z))] for i in range(len(z))]
        return g, grad, hess


_TRANSFORM_CACHE: dict = {}


def _spectral_extent(profile: BlobProfile, tol: float, power: int, kmax: float) -> float:
    key = (profile.d, profile.radius, profile.sharpness, power, kmax)
    if key not in _TRANSFORM_CACHE:
        xi = np.arange(0.0, kmax, 0.25)
        _TRANSFORM_CACHE[key] = (xi, np.abs(profile.radial_transform(xi, power)))
    xi, F = _TRANSFORM_CACHE[key]
    above = np.nonzero(F > tol * F[0])[0]
    K = float(xi[above[-1]] + 0.25) if len(above) else 0.0
    if K >= kmax - 0.25:
        raise ResolutionError(f"profile spectrum does not drop below {tol} before |xi| = {kmax}")
    return K


@dataclass(frozen=True)
class BlockParams:
    lam: int
    mu: int
    sigma: float
    nu: int
    s: float
    j: int = 0
    N: int = 1

    def __post_init__(self):
        for name in ("lam", "mu", "nu", "N"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.nu % self.lam:
            raise ValueError(f"nu={self.nu} must be a multiple of lam={self.lam}")
        if self.lam * self.mu / self.nu > 0.5:
            raise ValueError(f"need lam*mu/nu <= 1/2, got {self.lam * self.mu / self.nu}")
        if self.s <= 1:
            raise ValueError("concentration exponent s must exceed 1")
        if self.sigma <= 0:
            raise ValueError("phase speed must be positive")

    @property
    def s_prime(self) -> float:
        return self.s / (self.s - 1.0)

    def with_(self, **kw) -> "BlockParams":
        vals = dict(lam=self.lam, mu=self.mu, sigma=self.sigma, nu=self.nu, s=self.s, j=self.j, N=self.N)
        vals.update(kw)
        return BlockParams(**vals)


def psi_axis(d: int, j: int) -> int:
    if not 0 <= j < d:
        raise ValueError(f"direction {j} out of range for d={d}")
    return 1 if j == 0 else 0


class MikadoBlocks:
    """Closed-form Mikado blocks for all directions at one parameter set.

    `resolution_tol` sets the spectral tail used by the aliasing guard.  Pass
    None to skip the guard, e.g. when only pointwise values and quadrature
    norms are needed.
    """

    def __init__(self, grid: GridSpec, params: BlockParams, profile: BlobProfile | None = None,
                 resolution_tol: float | None = 1e-10):
        self.grid = grid
        self.params = params
        self.profile = profile or BlobProfile(grid.d)
        if self.profile.d != grid.d:
            raise ValueError("profile dimension differs from grid dimension")
        self.resolution_tol = resolution_tol
        if resolution_tol is not None:
            self.check_resolution(resolution_tol)

    # ------------------------------------------------------------ guard
    def active_frequency(self, tol: float) -> float:
        """Largest frequency present in the blob-times-slicing products."""
        p = self.params
        K2 = self.profile.spectral_extent(tol, power=2)
        return p.lam * p.mu * K2 + 2 * p.nu

    def check_resolution(self, tol: float) -> None:
        f = self.active_frequency(tol)
        if f >= self.grid.n / 2:
            raise ResolutionError(
                f"blocks need frequency {f:.1f} at tail {tol:g}, grid n={self.grid.n} resolves < {self.grid.n // 2}")

    # ------------------------------------------------------------ pieces
    def _axes(self, j: int, t: float, shift):
        g, p = self.grid, self.params
        zeta = self.profile.shifts[j]
        shift = np.zeros(g.d) if shift is None else np.asarray(shift, float)
        out = []
        for m, x in enumerate(g.coords):
            move = p.sigma * t if m == j else 0.0
            z = np.mod(p.lam * (x + shift[m] - move) - zeta[m], 1.0)
            out.append(p.mu * z)
        return out, shift

    def blob(self, j: int, t: float = 0.0, shift=None, variant: str = "density", order: int = 0):
        """Blob factor at time t (values, x-gradient list, x-Hessian) as raw arrays."""
        p, d = self.params, self.grid.d
        expo = d / p.s if variant == "density" else d / p.s_prime
        amp = float(p.mu) ** expo
        z, _ = self._axes(j, t, shift)
        val, grad, hess = self.profile.evaluate(z, order)
        shape = self.grid.shape
        val = np.broadcast_to(val * amp, shape)
        if grad is not None:
            fac = amp * p.lam * p.mu
            grad = [np.broadcast_to(gi * fac, shape) for gi in grad]
        if hess is not None:
            fac = amp * (p.lam * p.mu) ** 2
            hess = [[np.broadcast_to(h * fac, shape) for h in row] for row in hess]
        return val, grad, hess

    def _slice_coord(self, j: int, shift):
        m = psi_axis(self.grid.d, j)
        x = self.grid.coords[m]
        off = 0.0 if shift is None else float(np.asarray(shift, float)[m])
        return m, 2 * math.pi * self.params.nu * (x + off)

    def psi(self, j: int, shift=None, order: int = 0):
        m, arg = self._slice_coord(j, shift)
        val = math.sqrt(2.0) * np.cos(arg)
        if order == 0:
            return val
        return val, m, -math.sqrt(2.0) * 2 * math.pi * self.params.nu * np.sin(arg)

    def potential_b(self, j: int, shift=None) -> VectorField:
        m, arg = self._slice_coord(j, shift)
        vals = np.zeros((self.grid.d,) + self.grid.shape)
        vals[m] = math.sqrt(2.0) / (2 * math.pi) * np.sin(arg)
        return VectorField(self.grid, vals, copy=False)

    # ------------------------------------------------------------ blocks
    def theta(self, j: int, t: float = 0.0, shift=None) -> ScalarField:
        b, _, _ = self.blob(j, t, shift, "density")
        return ScalarField(self.grid, b * self.psi(j, shift), copy=False)

    def W(self, j: int, t: float = 0.0, shift=None) -> VectorField:
        b, _, _ = self.blob(j, t, shift, "field")
        vals = np.zeros((self.grid.d,) + self.grid.shape)
        vals[j] = b * self.psi(j, shift)
        return VectorField(self.grid, vals, copy=False)

    def Q(self, j: int, t: float = 0.0, shift=None) -> ScalarField:
        b1, _, _ = self.blob(j, t, shift, "density")
        b2, _, _ = self.blob(j, t, shift, "field")
        ps = self.psi(j, shift)
        return ScalarField(self.grid, b1 * b2 * ps * ps / self.params.sigma, copy=False)

    def W_corr(self, j: int, t: float = 0.0, shift=None) -> VectorField:
        _, grad, _ = self.blob(j, t, shift, "field", order=1)
        m, arg = self._slice_coord(j, shift)
        bm = math.sqrt(2.0) / (2 * math.pi) * np.sin(arg) / self.params.nu
        vals = np.zeros((self.grid.d,) + self.grid.shape)
        vals[j] = bm * grad[m]
        vals[m] = -bm * grad[j]
        return VectorField(self.grid, vals, copy=False)

    def A_N(self, j: int, t: float = 0.0, shift=None, N: int | None = None) -> VectorField:
        _, grad, _ = self.blob(j, t, shift, "density", order=1)
        f = ScalarField(self.grid, grad[j], copy=False)
        g = ScalarField(self.grid, np.broadcast_to(self.psi(j, shift), self.grid.shape), copy=False)
        return improved_antidiv(f, g, N or self.params.N) * self.params.sigma

    # ------------------------------------------------------------ analytic time derivatives
    def dtheta_dt(self, j: int, t: float = 0.0, shift=None) -> ScalarField:
        _, grad, _ = self.blob(j, t, shift, "density", order=1)
        return ScalarField(self.grid, -self.params.sigma * grad[j] * self.psi(j, shift), copy=False)

    def dQ_dt(self, j: int, t: float = 0.0, shift=None) -> ScalarField:
        b1, g1, _ = self.blob(j, t, shift, "density", order=1)
        b2, g2, _ = self.blob(j, t, shift, "field", order=1)
        ps = self.psi(j, shift)
        return ScalarField(self.grid, -(g1[j] * b2 + b1 * g2[j]) * ps * ps, copy=False)

    # ------------------------------------------------------------ analytic gradients
    def grad_theta(self, j: int, t: float = 0.0, shift=None) -> np.ndarray:
        b, gb, _ = self.blob(j, t, shift, "density", order=1)
        ps, m, dps = self.psi(j, shift, order=1)
        out = np.stack([gi * ps for gi in gb])
        out[m] = out[m] + b * dps
        return out

    def grad_W(self, j: int, t: float = 0.0, shift=None) -> np.ndarray:
        """Jacobian entries d_k W_i as array (i, k, ...)."""
        b, gb, _ = self.blob(j, t, shift, "field", order=1)
        ps, m, dps = self.psi(j, shift, order=1)
        d = self.grid.d
        out = np.zeros((d, d) + self.grid.shape)
        for k in range(d):
            out[j, k] = gb[k] * ps
        out[j, m] += b * dps
        return out

    def grad_Q(self, j: int, t: float = 0.0, shift=None) -> np.ndarray:
        b1, g1, _ = self.blob(j, t, shift, "density", order=1)
        b2, g2, _ = self.blob(j, t, shift, "field", order=1)
        ps, m, dps = self.psi(j, shift, order=1)
        out = np.stack([(g1[k] * b2 + b1 * g2[k]) * ps * ps for k in range(self.grid.d)])
        out[m] = out[m] + b1 * b2 * 2 * ps * dps
        return out / self.params.sigma

    def grad_W_corr(self, j: int, t: float = 0.0, shift=None) -> np.ndarray:
        _, gb, hb = self.blob(j, t, shift, "field", order=2)
        m, arg = self._slice_coord(j, shift)
        nu = self.params.nu
        c = math.sqrt(2.0) / (2 * math.pi) / nu
        bm = c * np.sin(arg)
        dbm = c * 2 * math.pi * nu * np.cos(arg)
        d = self.grid.d
        out = np.zeros((d, d) + self.grid.shape)
        for k in range(d):
            out[j, k] = bm * hb[m][k]
            out[m, k] = -bm * hb[j][k]
        out[j, m] += dbm * gb[m]
        out[m, m] -= dbm * gb[j]
        return out

    # ------------------------------------------------------------ sums over directions
    def sum_theta(self, t: float, shift=None) -> ScalarField:
        return sum((self.theta(j, t, shift) for j in range(1, self.grid.d)), self.theta(0, t, shift))

    def sum_W(self, t: float, shift=None) -> VectorField:
        return sum((self.W(j, t, shift) for j in range(1, self.grid.d)), self.W(0, t, shift))

    def sum_W_corr(self, t: float, shift=None) -> VectorField:
        return sum((self.W_corr(j, t, shift) for j in range(1, self.grid.d)), self.W_corr(0, t, shift))


# ---------------------------------------------------------------- checks

@dataclass
class IdentityReport:
    density_transport: float   # d_t Q + div(Theta W), relative
    potential: float           # d_t Theta + div A_N, relative
    corrector: float           # div(W + W_corr), relative
    times: list

    def worst(self) -> float:
        return max(self.density_transport, self.potential, self.corrector)


def _rel(res: np.ndarray, scale: float) -> float:
    return float(np.max(np.abs(res)) / scale) if scale > 0 else float(np.max(np.abs(res)))


def mikado_identity_check(blocks: MikadoBlocks, times: Sequence[float], N: int | None = None) -> IdentityReport:
    r_q = r_a = r_w = 0.0
    for t in times:
        for j in range(blocks.grid.d):
            dq = blocks.dQ_dt(j, t)
            th = blocks.theta(j, t)
            w = blocks.W(j, t)
            flux = derivative(ScalarField(blocks.grid, th.values * w.values[j], copy=False), j)
            r_q = max(r_q, _rel(dq.values + flux.values, max(dq.max_abs(), flux.max_abs())))
            dth = blocks.dtheta_dt(j, t)
            divA = divergence(blocks.A_N(j, t, N=N))
            r_a = max(r_a, _rel(dth.values + divA.values, max(dth.max_abs(), divA.max_abs())))
            divW = divergence(w)
            total = divergence(w + blocks.W_corr(j, t))
            r_w = max(r_w, _rel(total.values, divW.max_abs()))
    return IdentityReport(r_q, r_a, r_w, list(times))


def interaction_means(blocks: MikadoBlocks, t: float) -> np.ndarray:
    """Matrix M[i, j] = mean(Theta^i W^j) (a vector, reduced to component j)."""
    d = blocks.grid.d
    out = np.zeros((d, d))
    for i in range(d):
        th = blocks.theta(i, t)
        for j in range(d):
            out[i, j] = float(np.mean(th.values * blocks.W(j, t).values[j]))
    return out


def cross_supports_vanish(blocks: MikadoBlocks, t: float) -> bool:
    d = blocks.grid.d
    for i in range(d):
        th = blocks.theta(i, t).values
        for j in range(d):
            if i != j and np.any(th * blocks.W(j, t).values[j] != 0.0):
                return False
    return True


# ---------------------------------------------------------------- scaling

BLOCK_NAMES = ("theta", "Q", "W", "W_corr", "A_N")


def predicted_exponents(block: str, k: int, r: float, d: int, s: float) -> dict:
    """Exponents of (lam, mu, sigma, nu) in the leading-order size of ||grad^k block||_r."""
    sp = s / (s - 1.0)
    dr = 0.0 if r == math.inf else d / r
    table = {
        "theta": dict(lam=0, mu=d / s - dr, sigma=0, nu=k),
        "Q": dict(lam=0, mu=d - dr, sigma=-1, nu=k),
        "W": dict(lam=0, mu=d / sp - dr, sigma=0, nu=k),
        "W_corr": dict(lam=1, mu=1 + d / sp - dr, sigma=0, nu=k - 1),
        "A_N": dict(lam=1, mu=1 + d / s - dr, sigma=1, nu=k - 1),
    }
    return table[block]


def block_norm(blocks: MikadoBlocks, block: str, k: int, r: float, j: int = 0, t: float = 0.0) -> float:
    """||grad^k block||_{L^r} with analytic derivatives except for A_N (spectral)."""
    g = blocks.grid
    if block == "A_N":
        A = blocks.A_N(j, t)
        if k == 0:
            return lebesgue_norm(A, r)
        jac = np.stack([derivative(A, m).values for m in range(g.d)], axis=1)
        return _tensor_norm(jac, r, g.d)
    if k == 0:
        fld = {"theta": blocks.theta, "Q": blocks.Q, "W": blocks.W, "W_corr": blocks.W_corr}[block](j, t)
        return lebesgue_norm(fld, r)
    if k != 1:
        raise ValueError("scaling probe supports k in {0, 1}")
    arr = {"theta": blocks.grad_theta, "Q": blocks.grad_Q, "W": blocks.grad_W,
           "W_corr": blocks.grad_W_corr}[block](j, t)
    return _tensor_norm(arr, r, g.d)


def _tensor_norm(arr: np.ndarray, r: float, grid_ndim: int) -> float:
    flat = arr.reshape((-1,) + arr.shape[arr.ndim - grid_ndim:])
    mag = np.sqrt(np.sum(flat * flat, axis=0))
    if r == math.inf:
        return float(mag.max())
    return float(np.mean(mag ** r) ** (1.0 / r))


@dataclass
class ScalingFit:
    block: str
    param: str
    values: list
    norms: list
    fitted: float
    predicted: float
    k: int
    r: float

    @property
    def error(self) -> float:
        return abs(self.fitted - self.predicted)


def mikado_estimate_probe(grid: GridSpec, base: BlockParams, block: str, param: str,
                          values: Sequence, k: int = 0, r: float = 2.0,
                          profile: BlobProfile | None = None,
                          resolution_tol: float | None = None) -> ScalingFit:
    """Sweep one parameter, fit the log-log slope of ||grad^k block||_r."""
    if len(values) < 2:
        raise ValueError("degenerate sweep: need at least two values")
    norms = []
    for v in values:
        p = base.with_(**{param: v})
        blocks = MikadoBlocks(grid, p, profile, resolution_tol=resolution_tol)
        norms.append(block_norm(blocks, block, k, r, j=p.j))
    pred = predicted_exponents(block, k, r, grid.d, base.s)[param]
    return ScalingFit(block, param, list(values), norms, fit_loglog(values, norms), pred, k, r)
