"""One convex-integration stage for the stochastic transport equation.

A triple (rho, u, R) solves the continuity-defect equation

    d_t rho + u(t, x + B(t)) . grad rho = -div R,        div u = 0

pathwise for every Brownian sample.  A stage mollifies (rho, R), adds
concentrated perturbations built from the Mikado blocks, and splits the new
defect R_1 into named terms.  Every term is a closed-form field at a given
(t, omega), so the whole new triple can be evaluated lazily at any time.

Directions j and coordinate axes are 0-based.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .antidivergence import improved_antidiv, std_antidiv
from .brownian import (BrownianPath, StoppingData, mollify_path, sample_path,
                       stopping_time)
from .mikado_blocks import BlobProfile, BlockParams, MikadoBlocks, psi_axis
from .spectral_grid import (GridSpec, MollifierKernel, ResolutionError, ScalarField,
                            TimeField, VectorField, bandwidth, divergence, gradient, laplacian,
                            lebesgue_norm, mollify_space_time, sobolev_norm)


class InvalidConfigurationError(ValueError):
    """Raised with the list of violated named conditions."""

    def __init__(self, conditions: Sequence[str], detail: str = ""):
        self.conditions = list(conditions)
        msg = "violated: " + ", ".join(self.conditions)
        super().__init__(msg + (f" ({detail})" if detail else ""))


class StageInfeasible(ResolutionError):
    """No admissible parameter set can be represented on the grid."""

    def __init__(self, message: str, trials: list | None = None):
        super().__init__(message)
        self.trials = trials or []


DEFECT_TERMS = ("com", "quadr1", "quadr2", "time1", "time2", "time3",
                "sto1", "sto2", "sto3", "sto4", "sto5", "lin", "q", "corr")
STO_TERMS = ("sto1", "sto2", "sto3", "sto4", "sto5")


# ---------------------------------------------------------------- hypotheses and exponents

def _q(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x).limit_denominator(10 ** 6)


def hypothesis_violations(p, p_tilde, theta, d) -> list:
    """Names of the violated hypotheses on (p, p_tilde, theta, d)."""
    bad = []
    if int(d) != d or d < 2:
        bad.append("dimension")
        return bad
    if not (1 <= p < math.inf):
        bad.append("p_range")
    if not (1 < p_tilde < math.inf):
        bad.append("p_tilde_range")
    if not (0 <= theta <= 1):
        bad.append("theta_range")
    if bad:
        return bad
    P, Pt, th = _q(p), _q(p_tilde), _q(theta)
    if not (1 / P + 1 / Pt > 1 + th / d):
        bad.append("sum_condition")
    if not (Fraction(d) / Pt > 1 + th):
        bad.append("dimension_condition")
    return bad


def validate_hypotheses(p, p_tilde, theta, d) -> None:
    bad = hypothesis_violations(p, p_tilde, theta, d)
    if bad:
        raise InvalidConfigurationError(bad, f"p={p}, p_tilde={p_tilde}, theta={theta}, d={d}")


def _s_window(p, p_tilde, theta, d):
    P, Pt, th = _q(p), _q(p_tilde), _q(theta)
    lo = max(1 + th / d - 1 / Pt, Fraction(0))
    hi = min(1 / P, 1 - Fraction(1, d))
    return lo, hi


def choose_exponent_s(p, p_tilde, theta, d) -> float:
    """Concentration exponent s from the midpoint of the feasible window for 1/s."""
    return float(_choose_s(p, p_tilde, theta, d))


def _choose_s(p, p_tilde, theta, d) -> Fraction:
    validate_hypotheses(p, p_tilde, theta, d)
    lo, hi = _s_window(p, p_tilde, theta, d)
    if not lo < hi:
        raise InvalidConfigurationError(["s_window"], f"empty interval ({lo}, {hi}) for 1/s")
    return 1 / ((lo + hi) / 2)


def r_kappa(kappa) -> float:
    return (0.5 + kappa) / (0.5 - kappa)


def choose_kappa(d, s_prime) -> float:
    """kappa with r(kappa) halfway between 1 and d/s'."""
    return float(_choose_kappa(d, _q(s_prime)))


def _choose_kappa(d, s_prime: Fraction) -> Fraction:
    if not s_prime < d:
        raise InvalidConfigurationError(["s_dual"], f"s'={s_prime} must be below d={d}")
    R = (1 + Fraction(d) / s_prime) / 2
    return (R - 1) / (2 * (R + 1))


@dataclass(frozen=True)
class Exponents:
    p: float
    p_tilde: float
    theta: float
    d: int
    s: float
    s_prime: float
    kappa: float
    alpha: float
    beta: float
    gamma: float
    zeta: float
    N: int

    def as_dict(self) -> dict:
        return asdict(self)


def choose_parameters(p, p_tilde, theta, d, s=None, kappa=None) -> Exponents:
    """Smallest admissible integer alpha, integer gamma nearest its window midpoint,
    beta and zeta at their window midpoints, smallest admissible N."""
    validate_hypotheses(p, p_tilde, theta, d)
    S = _choose_s(p, p_tilde, theta, d) if s is None else _q(s)
    Sp = S / (S - 1)
    K = _choose_kappa(d, Sp) if kappa is None else _q(kappa)
    Pt, th = _q(p_tilde), _q(theta)
    D = Fraction(d) / Sp
    ratio = (Fraction(1, 2) - K) / (Fraction(1, 2) + K)
    gaps = [ratio * D - 1]
    caps = [ratio * D]
    if th > 0:
        gaps.append(Fraction(d) / th * (1 / S + 1 / Pt - 1 - th / d))
        caps.append(Fraction(d) / th * (1 / S + 1 / Pt - 1))
    if min(gaps) <= 0:
        raise InvalidConfigurationError(["alpha"], "a lower-bound coefficient is not positive")
    alpha = math.floor(max(Fraction(2) / g for g in gaps)) + 1
    lo, hi = alpha + 1, min(caps) * alpha
    ints = [g for g in range(math.floor(lo) + 1, math.ceil(hi)) if lo < g < hi]
    if not ints:
        raise InvalidConfigurationError(["gamma"], f"no integer in ({lo}, {float(hi)})")
    mid = (lo + hi) / 2
    gamma = min(ints, key=lambda g: (abs(g - mid), g))
    beta = D * alpha + Fraction(gamma - alpha - 1, 2)
    r = Fraction(gamma, 1 + alpha)
    if r <= 1:
        raise InvalidConfigurationError(["N"], "gamma/(1 + alpha) must exceed 1")
    N = max(2, math.floor(r / (r - 1)) + 1)
    z_lo = gamma / (Fraction(1, 2) - K)
    z_hi = D * alpha / (Fraction(1, 2) + K)
    if not z_lo < z_hi:
        raise InvalidConfigurationError(["zeta"], "empty interval")
    zeta = (z_lo + z_hi) / 2
    return Exponents(float(p), float(p_tilde), float(theta), int(d), float(S), float(Sp), float(K),
                     float(alpha), float(beta), float(gamma), float(zeta), int(N))


def exponent_conditions(e: Exponents) -> dict:
    """Independent float check of the seven admissibility conditions."""
    d, s, sp, k = e.d, e.s, e.s_prime, e.kappa
    D = d / sp
    th = e.theta
    out = {}
    out["s"] = (1 / e.p + 1 / e.p_tilde > 1 / s + 1 / e.p_tilde > 1 + th / d) and sp < d and s > 1 \
        and abs(1 / s + 1 / sp - 1) < 1e-12
    out["kappa"] = 0 < k < 0.5 and r_kappa(k) < D
    lower = [((0.5 - k) / (0.5 + k) * D - 1) * e.alpha > 2]
    caps = [(0.5 - k) / (0.5 + k) * D]
    if th > 0:
        lower.append(d / th * (1 / s + 1 / e.p_tilde - 1 - th / d) * e.alpha > 2)
        caps.append(d / th * (1 / s + 1 / e.p_tilde - 1))
    out["alpha"] = all(lower)
    out["gamma"] = e.alpha + 1 < e.gamma < min(caps) * e.alpha and float(e.gamma).is_integer()
    out["beta"] = 1 < e.beta and D * e.alpha < e.beta < D * e.alpha + (e.gamma - e.alpha - 1)
    out["N"] = e.N >= 2 and e.N / (e.N - 1) < e.gamma / (1 + e.alpha)
    out["zeta"] = 1 < e.zeta and e.gamma / (0.5 - k) < e.zeta < D * e.alpha / (0.5 + k)
    return out


def predicted_lambda_exponents(e: Exponents, diffusion: bool = False) -> dict:
    """Leading lambda-power of each defect term under mu = lam^alpha, etc."""
    a, b, g, z, k, N = e.alpha, e.beta, e.gamma, e.zeta, e.kappa, e.N
    D = e.d / e.s_prime
    Ds = e.d / e.s
    t2 = 1 + (1 - D) * a + b - g
    out = {
        "com": 0.0,
        "quadr1": 1 + a - g,
        "quadr2": -1.0,
        "time1": -b,
        "sto1": g - z * (0.5 - k),
        "sto2": z * (0.5 + k) - b,
        "sto3": z * (0.5 + k) - b,
        "lin": max(-Ds * a, -D * a),
        "time2": max(t2, t2 + (1 + a) * N - g * (N - 1)),
        "time3": max(t2, t2 + (1 + a) * N - g * (N - 1)),
        "sto4": -D * a + (0.5 + k) * z,
        "sto5": -D * a + (0.5 + k) * z,
        "q": D * a - b,
        "corr": max(1 + a - g, (D * a - b) + (1 + a - g)),
    }
    if diffusion:
        out["diff"] = g - D * a
    return out


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class PowerSchedule:
    """mu = mu0 lam^alpha, nu = nu0 lam^gamma, sigma = sigma0 lam^beta, ell = ell0 lam^-zeta."""
    alpha: float
    beta: float
    gamma: float
    zeta: float
    N: int = 1
    mu0: float = 1.0
    nu0: float = 1.0
    sigma0: float = 1.0
    ell0: float = 1.0

    @classmethod
    def from_exponents(cls, e: Exponents) -> "PowerSchedule":
        return cls(e.alpha, e.beta, e.gamma, e.zeta, e.N)

    def at(self, lam: int) -> dict:
        mu = self.mu0 * float(lam) ** self.alpha
        nu = self.nu0 * float(lam) ** self.gamma
        return dict(lam=int(lam), mu=mu, nu=nu, sigma=self.sigma0 * float(lam) ** self.beta,
                    ell=self.ell0 * float(lam) ** (-self.zeta), N=self.N)


@dataclass(frozen=True)
class StageParams:
    delta: float
    eps: float
    ell: float
    lam: int
    mu: int
    sigma: float
    nu: int
    N: int
    s: float
    kappa: float
    faithful: bool = False

    def block_params(self) -> BlockParams:
        return BlockParams(self.lam, self.mu, self.sigma, self.nu, self.s, N=self.N)

    def as_dict(self) -> dict:
        return asdict(self)


def resolution_requirements(lam, mu, nu, ell, profile: BlobProfile, tol: float = 1e-6,
                            extra_band: float = 2.0) -> dict:
    """Smallest grid sizes that could represent a stage with these parameters."""
    K2 = profile.spectral_extent(tol, power=2)
    freq = lam * mu * K2 + 2 * nu + extra_band
    return {"n": 2 * freq, "n_t": 2.0 / ell + 1}


# ---------------------------------------------------------------- ensembles and triples

@dataclass(frozen=True, eq=False)
class Sample:
    seed: int
    path: BrownianPath
    stop: StoppingData


def make_ensemble(seeds: Sequence[int], grid: GridSpec, L: float, kappa: float) -> tuple:
    out = []
    for sd in seeds:
        path = sample_path(int(sd), grid.n_t, grid.d)
        out.append(Sample(int(sd), path, stopping_time(path, L, kappa)))
    return tuple(out)


@dataclass(eq=False)
class StageTriple:
    """(rho, u, R) with rho and R per ensemble member and u deterministic."""
    grid: GridSpec
    u: TimeField
    rho: tuple
    R: tuple
    ensemble: tuple
    u_is_zero: bool = False
    diffusion: bool = False
    index: int = 0

    def u_shifted(self, i: int, t: float) -> VectorField:
        if self.u_is_zero:
            return VectorField.zeros(self.grid)
        return self.u.at_shift(t, self.ensemble[i].path.at(t))

    def sample_times(self, i: int, stride: int = 1) -> np.ndarray:
        g = self.grid
        k = self.ensemble[i].stop.index
        idx = list(range(0, k + 1, max(1, stride)))
        if idx[-1] != k:
            idx.append(k)
        return g.times[idx]


def _smooth_step(u):
    u = np.asarray(u, float)
    f = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    v = 1.0 - u
    fv = np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)
    return f / (f + fv)


def _smooth_step_dot(u):
    u = np.asarray(u, float)
    ok = (u > 0) & (u < 1)
    out = np.zeros_like(u)
    x = u[ok]
    f, fv = np.exp(-1.0 / x), np.exp(-1.0 / (1.0 - x))
    df, dfv = f / x ** 2, fv / (1.0 - x) ** 2
    out[ok] = (df * fv + f * dfv) / (f + fv) ** 2
    return out


def ramp(t):
    """0 on [0, 1/3], 1 on [2/3, 1], smooth in between."""
    return float(_smooth_step(3.0 * (np.asarray(t, float) - 1.0 / 3.0)))


def ramp_dot(t):
    return float(3.0 * _smooth_step_dot(3.0 * (np.asarray(t, float) - 1.0 / 3.0)))


def initial_profile(grid: GridSpec, p: float) -> ScalarField:
    """Mean-zero low mode cos(2 pi x_0) + cos(2 pi x_1), scaled to unit L^p norm on the grid."""
    x = grid.coords
    raw = ScalarField(grid, np.broadcast_to(np.cos(2 * math.pi * x[0]) + np.cos(2 * math.pi * x[1]),
                                            grid.shape).copy())
    return raw * (1.0 / lebesgue_norm(raw, p))


def zero_velocity(grid: GridSpec) -> TimeField:
    zero = VectorField.zeros(grid)
    return TimeField(grid, lambda t: zero, shifted=lambda t, y: zero)


def initial_stage(p: float, grid: GridSpec, ensemble: Sequence[Sample], diffusion: bool = False) -> StageTriple:
    """rho_0 = chi(t) Phi, u_0 = 0 and the matching defect.

    Without diffusion R_0 = -chi'(t) div^-1 Phi.  With diffusion the defect also
    carries chi(t) grad Phi, so that d_t rho - lap rho = -div R.
    """
    Phi = initial_profile(grid, p)
    rho = TimeField.separable(ramp, ramp_dot, Phi)
    base = std_antidiv(Phi) * -1.0
    if diffusion:
        R = TimeField.sum_of_separable([(ramp_dot, None, base), (ramp, ramp_dot, gradient(Phi))])
    else:
        R = TimeField.separable(ramp_dot, None, base)
    n = len(ensemble)
    return StageTriple(grid, zero_velocity(grid), (rho,) * n, (R,) * n, tuple(ensemble),
                       u_is_zero=True, diffusion=diffusion, index=0)


def shear_stage(p: float, grid: GridSpec, ensemble: Sequence[Sample], amplitude: float = 1.0) -> StageTriple:
    """Initial density with a nonzero deterministic shear u_0 = chi(t) a (sin 2 pi x_1, 0, ...).

    The defect R_0 = -div^-1(d_t rho_0 + div(u_0(Psi) rho_0)) depends on omega.
    Useful to exercise the commutator term, which vanishes when u_0 = 0.
    """
    Phi = initial_profile(grid, p)
    rho = TimeField.separable(ramp, ramp_dot, Phi)
    d = grid.d

    def shear_at(t, y):
        vals = np.zeros((d,) + grid.shape)
        vals[0] = amplitude * ramp(t) * np.sin(2 * math.pi * (grid.coords[1] + y[1]))
        return VectorField(grid, vals, copy=False)

    u = TimeField(grid, lambda t: shear_at(t, np.zeros(d)), shifted=shear_at)
    Rs = []
    for smp in ensemble:
        def R_at(t, smp=smp):
            flux = shear_at(t, smp.path.at(t)) * (Phi * ramp(t))
            src = Phi * ramp_dot(t) + divergence(flux)
            return std_antidiv(src - src.mean) * -1.0
        Rs.append(TimeField(grid, R_at, cache_size=64))
    return StageTriple(grid, u, (rho,) * len(ensemble), tuple(Rs), tuple(ensemble), index=0)


# ---------------------------------------------------------------- stage construction

@dataclass
class Snapshot:
    t: float
    rho_eps: ScalarField
    vartheta: ScalarField
    q: ScalarField
    vartheta_c: float
    q_c: float
    rho1: ScalarField
    u1_shifted: VectorField
    w_shifted: VectorField
    wc_shifted: VectorField
    u0_shifted: VectorField
    R1: VectorField
    terms: dict


class Stage:
    """Lazily evaluated stage output for every ensemble member."""

    def __init__(self, prev: StageTriple, params: StageParams, profile: BlobProfile | None = None,
                 kernel: MollifierKernel | None = None, resolution_tol: float | None = 1e-6,
                 cache: int = 8):
        g = prev.grid
        self.prev = prev
        self.grid = g
        self.params = params
        self.kernel = kernel or MollifierKernel()
        self.profile = profile or BlobProfile(g.d)
        self.diffusion = prev.diffusion
        bp = params.block_params()
        self.blocks = MikadoBlocks(g, bp, self.profile, resolution_tol=None)
        eps = params.eps
        self.rho_eps, self.R_eps, self.dR_eps, self.com_src, self.mpaths = [], [], [], [], []
        for i, smp in enumerate(prev.ensemble):
            tau = smp.stop.tau
            self.rho_eps.append(mollify_space_time(prev.rho[i], eps, self.kernel, tau))
            self.R_eps.append(mollify_space_time(prev.R[i], eps, self.kernel, tau))
            self.dR_eps.append(mollify_space_time(prev.R[i], eps, self.kernel, tau, derivative=True))
            if prev.u_is_zero:
                self.com_src.append(None)
            else:
                flux = TimeField(g, lambda t, i=i: prev.u_shifted(i, t) * prev.rho[i](t),
                                 grid_sampled=prev.rho[i].grid_sampled)
                self.com_src.append(mollify_space_time(flux, eps, self.kernel, tau))
            self.mpaths.append(mollify_path(smp.path, params.ell))
        if resolution_tol is not None:
            self.check_resolution(resolution_tol)
        self._cache: dict = {}
        self._cache_size = cache

    # ------------------------------------------------------------ guards
    def defect_bandwidth(self, tol: float = 1e-6, probes: int = 4) -> int:
        worst = 0
        for i, smp in enumerate(self.prev.ensemble):
            for t in np.linspace(0.0, smp.stop.tau, probes):
                worst = max(worst, bandwidth(self.R_eps[i](t), tol), bandwidth(self.rho_eps[i](t), tol))
        return worst

    def check_resolution(self, tol: float) -> None:
        band = self.blocks.active_frequency(tol) + self.defect_bandwidth(tol)
        if band >= self.grid.n / 2:
            raise ResolutionError(
                f"stage needs frequency {band:.1f} at tail {tol:g}, grid n={self.grid.n} resolves < {self.grid.n // 2}")

    # ------------------------------------------------------------ pieces
    def density(self, i: int, t: float) -> ScalarField:
        """rho_1 only; cheaper than a full snapshot."""
        bl = self.blocks
        Bl = self.mpaths[i].at(t)
        R = self.R_eps[i](t)
        rho = self.rho_eps[i](t)
        vt = ScalarField.zeros(self.grid)
        q = ScalarField.zeros(self.grid)
        for j in range(self.grid.d):
            Rj = R.component(j)
            vt = vt + Rj * bl.theta(j, t, Bl)
            q = q + Rj * bl.Q(j, t, Bl)
        return rho + vt + q - (vt.mean + q.mean)

    def velocity(self, t: float, shift=None) -> VectorField:
        u0 = self.prev.u
        shift = np.zeros(self.grid.d) if shift is None else np.asarray(shift, float)
        base = VectorField.zeros(self.grid) if self.prev.u_is_zero else u0.at_shift(t, shift)
        return base + self.blocks.sum_W(t, shift) + self.blocks.sum_W_corr(t, shift)

    def snapshot(self, i: int, t: float) -> Snapshot:
        key = (i, float(t))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        snap = self._snapshot(i, float(t))
        if len(self._cache) >= self._cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = snap
        return snap

    def _snapshot(self, i: int, t: float) -> Snapshot:
        g, bl, d = self.grid, self.blocks, self.grid.d
        nu = self.params.nu
        path, mp = self.prev.ensemble[i].path, self.mpaths[i]
        B, Bl, Bd = path.at(t), mp.at(t), mp.velocity(t)
        R = self.R_eps[i](t)
        dR = self.dR_eps[i](t)
        rho = self.rho_eps[i](t)
        Rc = R.components
        dRc = dR.components
        gradR = [gradient(Rj) for Rj in Rc]
        theta = [bl.theta(j, t, Bl) for j in range(d)]
        Q = [bl.Q(j, t, Bl) for j in range(d)]
        A = [bl.A_N(j, t, Bl) for j in range(d)]
        wB = bl.sum_W(t, B)
        wl = bl.sum_W(t, Bl)
        wcB = bl.sum_W_corr(t, B)
        u0B = self.prev.u_shifted(i, t)

        vt = _sum(Rc[j] * theta[j] for j in range(d))
        q = _sum(Rc[j] * Q[j] for j in range(d))
        vt_c, q_c = -vt.mean, -q.mean
        rho1 = rho + vt + q + (vt_c + q_c)
        u1B = u0B + wB + wcB
        Bd_field = [float(b) for b in Bd]

        def along(gr: VectorField) -> ScalarField:
            return _sum(gr.component(m) * Bd_field[m] for m in range(d))

        def const_vector(scalar: ScalarField, vec) -> VectorField:
            return VectorField(g, np.stack([scalar.values * v for v in vec]), copy=False)

        def antidiv_centred(f: ScalarField) -> VectorField:
            return std_antidiv(f - f.mean)

        terms = {}
        if self.com_src[i] is None:
            terms["com"] = VectorField.zeros(g)
        else:
            terms["com"] = -(u0B * rho - self.com_src[i](t))

        quadr1 = VectorField.zeros(g)
        quadr2 = VectorField.zeros(g)
        for j in range(d):
            b1, _, _ = bl.blob(j, t, Bl, "density")
            b2, _, _ = bl.blob(j, t, Bl, "field")
            pair = ScalarField(g, b1 * b2, copy=False)
            m = psi_axis(d, j)
            osc = np.cos(4 * math.pi * nu * (g.coords[m] + Bl[m]))
            osc = ScalarField(g, np.broadcast_to(osc, g.shape), copy=False)
            dj = gradR[j].component(j)
            quadr1 = quadr1 - improved_antidiv(dj * pair, osc, 1)
            mpair = pair.mean
            quadr2 = quadr2 - improved_antidiv(dj, pair - mpair, 1) - std_antidiv(dj - dj.mean) * (mpair - 1.0)
        terms["quadr1"] = quadr1
        terms["quadr2"] = quadr2
        terms["time1"] = -antidiv_centred(_sum(dRc[j] * Q[j] for j in range(d)))
        terms["time2"] = _sum(A[j] * Rc[j] for j in range(d))
        terms["time3"] = -antidiv_centred(_sum(gradR[j].dot(A[j]) for j in range(d)))
        terms["sto1"] = -((wB - wl) * vt)
        terms["sto2"] = -const_vector(q, Bd_field)
        terms["sto3"] = antidiv_centred(_sum(along(gradR[j]) * Q[j] for j in range(d)))
        terms["sto4"] = -const_vector(vt, Bd_field)
        terms["sto5"] = antidiv_centred(_sum(along(gradR[j]) * theta[j] for j in range(d)))
        terms["lin"] = -(antidiv_centred(_sum(dRc[j] * theta[j] for j in range(d))) + wB * rho + u0B * vt)
        terms["q"] = -((u0B + wB) * q)
        terms["corr"] = -(wcB * (rho + vt + q))
        if self.diffusion:
            acc = np.zeros((d,) + g.shape)
            for j in range(d):
                acc += (theta[j].values + Q[j].values) * gradR[j].values
                acc += Rc[j].values * (bl.grad_theta(j, t, Bl) + bl.grad_Q(j, t, Bl))
            terms["diff"] = VectorField(g, acc, copy=False)
        R1 = _sum(terms.values())
        return Snapshot(t, rho, vt, q, vt_c, q_c, rho1, u1B, wB, wcB, u0B, R1, terms)

    # ------------------------------------------------------------ outputs
    def next_triple(self) -> StageTriple:
        prev = self.prev
        g = self.grid
        n = len(prev.ensemble)
        rho = tuple(TimeField(g, lambda t, i=i: self.snapshot(i, t).rho1, grid_sampled=True) for i in range(n))
        R = tuple(TimeField(g, lambda t, i=i: self.snapshot(i, t).R1, grid_sampled=True) for i in range(n))
        u = TimeField(g, lambda t: self.velocity(t), shifted=lambda t, y: self.velocity(t, y))
        return StageTriple(g, u, rho, R, prev.ensemble, u_is_zero=False, diffusion=prev.diffusion,
                           index=prev.index + 1)


def _sum(items):
    it = iter(items)
    acc = next(it)
    for x in it:
        acc = acc + x
    return acc


# ---------------------------------------------------------------- strong-form check

def strong_residual(stage: Stage, i: int, t: float, h: float | None = None) -> dict:
    """Pointwise d_t rho_1 + div(u_1(Psi) rho_1) + div R_1 (- lap rho_1 with diffusion).

    d_t rho_1 is a fourth-order centred difference of the closed-form density.
    Returns the max residual and the largest of the individual terms.
    """
    p = stage.params
    if h is None:
        speed = float(np.max(np.abs(stage.mpaths[i].velocity(t))))
        scales = [p.ell, p.eps, 1.0 / (p.sigma * p.lam * p.mu), 1.0 / (2 * math.pi * p.nu * max(speed, 1.0))]
        h = min(scales) / 256.0
    f = [stage.density(i, t + k * h) for k in (-2, -1, 1, 2)]
    dt_rho = (f[0] - f[1] * 8.0 + f[2] * 8.0 - f[3]) * (1.0 / (12.0 * h))
    snap = stage.snapshot(i, t)
    flux = divergence(snap.u1_shifted * snap.rho1)
    dR = divergence(snap.R1)
    res = dt_rho + flux + dR
    parts = [dt_rho.max_abs(), flux.max_abs(), dR.max_abs()]
    if stage.diffusion:
        lap = laplacian(snap.rho1)
        res = res - lap
        parts.append(lap.max_abs())
    return {"residual": res.max_abs(), "scale": max(parts), "step": h}


# ---------------------------------------------------------------- norms and reports

@dataclass
class DefectBreakdown:
    norms: dict
    per_member: dict = field(default_factory=dict)

    def total_bound(self) -> float:
        return float(sum(self.norms.values()))


@dataclass
class StageReport:
    params: dict
    faithful: bool
    delta: float
    breakdown: dict
    contract: dict
    passed: bool
    div_u: float
    u_member_spread: float
    window: dict
    M: float
    R0_norm: float
    eps_selection: dict = field(default_factory=dict)
    lam_trials: list = field(default_factory=list)
    exponents: dict | None = None
    seeds: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


@dataclass(frozen=True)
class StageConfig:
    p: float = 2.0
    p_tilde: float = 1.5
    theta: float = 0.0
    time_stride: int = 8
    resolution_tol: float = 1e-6
    eps_max: float = 0.25
    eps_steps: int = 10
    lam_start: int = 2
    lam_max: int = 1024
    window_tol: float = 1e-12
    members: int | None = None  # evaluate contract on the first k members only


def _times(triple: StageTriple, i: int, stride: int) -> np.ndarray:
    return triple.sample_times(i, stride)


def defect_norm(triple: StageTriple, stride: int = 1, members: int | None = None) -> float:
    """max over members and sample times t <= tau of ||R(t)||_{L^1}."""
    best = 0.0
    for i in range(len(triple.ensemble) if members is None else members):
        for t in _times(triple, i, stride):
            best = max(best, lebesgue_norm(triple.R[i](t), 1))
    return best


def select_eps(triple: StageTriple, delta: float, config: StageConfig,
               kernel: MollifierKernel | None = None) -> tuple:
    """Largest eps in [2h, eps_max] meeting the three delta/2 conditions.

    Conditions: ||rho_eps - rho||_{L^p}, ||commutator||_{L^1} and
    ||(rho_eps - rho) u(Psi)||_{L^1}, each at most delta/2 over the sampled times.
    """
    kernel = kernel or MollifierKernel()
    g = triple.grid
    members = range(len(triple.ensemble) if config.members is None else config.members)

    def worst(eps):
        out = {"density": 0.0, "commutator": 0.0, "momentum": 0.0}
        for i in members:
            tau = triple.ensemble[i].stop.tau
            rho_e = mollify_space_time(triple.rho[i], eps, kernel, tau)
            com = None
            if not triple.u_is_zero:
                flux = TimeField(g, lambda t, i=i: triple.u_shifted(i, t) * triple.rho[i](t),
                                 grid_sampled=triple.rho[i].grid_sampled)
                com = mollify_space_time(flux, eps, kernel, tau)
            for t in _times(triple, i, config.time_stride):
                diff = rho_e(t) - triple.rho[i](t)
                out["density"] = max(out["density"], lebesgue_norm(diff, config.p))
                if com is not None:
                    u = triple.u_shifted(i, t)
                    out["commutator"] = max(out["commutator"],
                                            lebesgue_norm(u * rho_e(t) - com(t), 1))
                    out["momentum"] = max(out["momentum"], lebesgue_norm(u * diff, 1))
        return out

    def ok(vals):
        return all(v <= delta / 2 for v in vals.values())

    lo, hi = 2.0 * g.h * (1 + 1e-9), config.eps_max
    trace = []
    # the smallest scale is the cheapest to test and decides feasibility
    v_lo = worst(lo)
    trace.append((lo, v_lo))
    if not ok(v_lo):
        raise StageInfeasible(f"no mollification scale >= 2h meets the delta/2 conditions: {v_lo}")
    v_hi = worst(hi)
    trace.append((hi, v_hi))
    if ok(v_hi):
        return hi, {"eps": hi, "trace": trace}
    for _ in range(config.eps_steps):
        mid = math.sqrt(lo * hi)
        v = worst(mid)
        trace.append((mid, v))
        if ok(v):
            lo = mid
        else:
            hi = mid
    return lo, {"eps": lo, "trace": trace}


def vanishing_time(triple: StageTriple, i: int, tol: float = 1e-12) -> float:
    """Largest grid time a with rho, R zero on [0, min(tau, a)] (sampled)."""
    g = triple.grid
    last = 0.0
    for t in g.times[: triple.ensemble[i].stop.index + 1]:
        if triple.rho[i](t).max_abs() > tol or triple.R[i](t).max_abs() > tol:
            return last
        last = float(t)
    return last


def evaluate_stage(stage: Stage, config: StageConfig, M: float | None = None,
                   R0_norm: float | None = None) -> StageReport:
    """Contract values, defect breakdown and invariants over the ensemble."""
    t0 = time.perf_counter()
    prev, p, g = stage.prev, stage.params, stage.grid
    delta = p.delta
    n = len(prev.ensemble) if config.members is None else min(config.members, len(prev.ensemble))
    names = list(DEFECT_TERMS) + (["diff"] if stage.diffusion else [])
    norms = {k: 0.0 for k in names}
    per_member = {k: [] for k in names}
    rho_dist = momentum = defect = R0 = 0.0
    member_momentum, member_R0 = [], []
    window = {}
    for i in range(n):
        a = vanishing_time(prev, i, config.window_tol)
        cut = min(prev.ensemble[i].stop.tau, a - delta)
        member_norms = {k: 0.0 for k in names}
        win_max = mom_i = R0_i = 0.0
        for t in _times(prev, i, config.time_stride):
            snap = stage.snapshot(i, t)
            for k in names:
                member_norms[k] = max(member_norms[k], lebesgue_norm(snap.terms[k], 1))
            rho_dist = max(rho_dist, lebesgue_norm(snap.rho1 - prev.rho[i](t), config.p))
            mom = snap.u1_shifted * snap.rho1 - prev.u_shifted(i, t) * prev.rho[i](t)
            mom_i = max(mom_i, lebesgue_norm(mom, 1))
            defect = max(defect, lebesgue_norm(snap.R1, 1))
            R0_i = max(R0_i, lebesgue_norm(prev.R[i](t), 1))
            if t <= cut:
                win_max = max(win_max, snap.rho1.max_abs(), snap.R1.max_abs())
        member_momentum.append(mom_i)
        member_R0.append(R0_i)
        momentum, R0 = max(momentum, mom_i), max(R0, R0_i)
        for k in names:
            per_member[k].append(member_norms[k])
            norms[k] = max(norms[k], member_norms[k])
        window[str(prev.ensemble[i].seed)] = {"a": a, "cut": cut, "max_abs": win_max}
    if R0_norm is None:
        R0_norm = R0
    if M is None:
        # calibrate on the first member only, so the other members are a genuine check
        M = fit_momentum_constant(member_momentum[0], member_R0[0], delta)
    vel_dist = div_u = 0.0
    for t in g.times[:: max(1, config.time_stride)]:
        du = stage.velocity(t) - (VectorField.zeros(g) if prev.u_is_zero else prev.u(t))
        vel_dist = max(vel_dist, sobolev_norm(du, config.theta, config.p_tilde))
        div_u = max(div_u, divergence(stage.velocity(t)).max_abs())
    spread = u_member_spread(stage, g.times[:: max(1, 4 * config.time_stride)])
    contract = {
        "rho_distance": {"value": rho_dist, "bound": delta, "passed": rho_dist <= delta},
        "momentum": {"value": momentum, "bound": M * R0_norm + delta,
                     "passed": all(m <= M * r + delta * (1 + 1e-12)
                                   for m, r in zip(member_momentum, member_R0)),
                     "per_member": member_momentum},
        "velocity_distance": {"value": vel_dist, "bound": delta, "passed": vel_dist <= delta},
        "defect": {"value": defect, "bound": delta, "passed": defect <= delta},
    }
    win_ok = all(w["max_abs"] <= config.window_tol for w in window.values())
    passed = all(c["passed"] for c in contract.values()) and div_u <= 1e-10 and spread <= 1e-14 and win_ok
    return StageReport(params=p.as_dict(), faithful=p.faithful, delta=delta,
                       breakdown=DefectBreakdown(norms, per_member).__dict__, contract=contract,
                       passed=passed, div_u=div_u, u_member_spread=spread,
                       window={"holds": win_ok, "members": window}, M=M, R0_norm=R0_norm,
                       seeds=[s.seed for s in prev.ensemble[:n]],
                       timings={"evaluate_s": time.perf_counter() - t0})


def fit_momentum_constant(momentum: float, R0_norm: float, delta: float) -> float:
    """Observed ||rho_1 u_1(Psi) - rho_0 u_0(Psi)|| / ||R_0|| after removing delta."""
    if R0_norm <= 0:
        return 0.0
    return max(momentum - delta, 0.0) / R0_norm


def restrict(triple: StageTriple, members: Sequence[int]) -> StageTriple:
    """The same triple seen by a sub-ensemble."""
    idx = list(members)
    return StageTriple(triple.grid, triple.u, tuple(triple.rho[i] for i in idx),
                       tuple(triple.R[i] for i in idx), tuple(triple.ensemble[i] for i in idx),
                       triple.u_is_zero, triple.diffusion, triple.index)


def defect_exponent_sweep(triple: StageTriple, lams: Sequence[int], eps: float,
                          config: StageConfig | None = None, schedule: PowerSchedule | None = None,
                          profile: BlobProfile | None = None, tol: float = 0.3) -> dict:
    """Fit the lambda-exponent of every defect term's C_tau L^1 norm over a lambda sweep.

    The predictions are evaluated at the schedule's own exponents, so a
    surrogate schedule is compared against its own table.  Raises
    StageInfeasible when some lambda of the sweep cannot be represented.
    """
    config = config or StageConfig()
    g = triple.grid
    profile = profile or BlobProfile(g.d)
    exps = choose_parameters(config.p, config.p_tilde, config.theta, g.d)
    faithful = schedule is None
    schedule = schedule or PowerSchedule.from_exponents(exps)
    table_exps = replace(exps, alpha=schedule.alpha, beta=schedule.beta, gamma=schedule.gamma,
                         zeta=schedule.zeta, N=schedule.N)
    predicted = predicted_lambda_exponents(table_exps, triple.diffusion)
    names = list(predicted)
    trials = []
    for lam in lams:
        vals = schedule.at(lam)
        need = resolution_requirements(lam, vals["mu"], vals["nu"], vals["ell"], profile, config.resolution_tol)
        trials.append({"lam": lam, "needs_n": need["n"], "needs_n_t": need["n_t"]})
        if need["n"] >= g.n or need["n_t"] > g.n_t:
            raise StageInfeasible(f"lambda={lam} needs n >= {need['n']:.3g}, n_t >= {need['n_t']:.3g}", trials)
    n = len(triple.ensemble) if config.members is None else min(config.members, len(triple.ensemble))
    norms = {k: [] for k in names}
    for lam in lams:
        params = stage_params_from(schedule, lam, 1.0, eps, exps.s, exps.kappa, faithful)
        stage = Stage(triple, params, profile, resolution_tol=config.resolution_tol)
        worst = {k: 0.0 for k in names}
        for i in range(n):
            for t in _times(triple, i, config.time_stride):
                snap = stage.snapshot(i, t)
                for k in names:
                    worst[k] = max(worst[k], lebesgue_norm(snap.terms[k], 1))
        for k in names:
            norms[k].append(worst[k])
    slopes = {}
    for k in names:
        vals = np.asarray(norms[k])
        slopes[k] = None if np.any(vals <= 0) else float(np.polyfit(np.log(lams), np.log(vals), 1)[0])
    within = {k: slopes[k] is not None and abs(slopes[k] - predicted[k]) <= tol for k in names}
    negative = {k: slopes[k] is not None and slopes[k] < 0 for k in names}
    return {"lams": list(lams), "norms": norms, "slopes": slopes, "predicted": predicted,
            "within": within, "negative": negative, "trials": trials}


def u_member_spread(stage: Stage, times) -> float:
    """Largest difference between u_1 built from single-member stages.

    Rebuilding the stage for each member alone shows that no path information
    leaks into the velocity.
    """
    prev = stage.prev
    worst = 0.0
    solo = [Stage(restrict(prev, [i]), stage.params, stage.profile, stage.kernel, resolution_tol=None)
            for i in range(len(prev.ensemble))]
    for t in times:
        ref = stage.velocity(t).values
        for st in solo:
            worst = max(worst, float(np.max(np.abs(st.velocity(t).values - ref))))
    return worst


# ---------------------------------------------------------------- driver

def stage_params_from(schedule: PowerSchedule, lam: int, delta: float, eps: float,
                      s: float, kappa: float, faithful: bool) -> StageParams:
    vals = schedule.at(lam)
    mu, nu = vals["mu"], vals["nu"]
    if not (float(mu).is_integer() and float(nu).is_integer()):
        raise ValueError(f"mu={mu}, nu={nu} must be integers at lam={lam}")
    return StageParams(delta=delta, eps=eps, ell=vals["ell"], lam=int(lam), mu=int(mu),
                       sigma=float(vals["sigma"]), nu=int(nu), N=int(vals["N"]), s=s, kappa=kappa,
                       faithful=faithful)


def run_stage(triple: StageTriple, delta: float, config: StageConfig | None = None,
              schedule: PowerSchedule | None = None, params: StageParams | None = None,
              M: float | None = None, profile: BlobProfile | None = None,
              kernel: MollifierKernel | None = None):
    """One stage.  Returns (new triple, report, stage).

    With explicit `params` the stage is built at exactly those values (eps is
    selected if params.eps is None).  Otherwise lambda is doubled from
    `lam_start` under `schedule` (default: the chosen exponents) until every
    contract bound holds.  StageInfeasible is raised when no lambda in the
    search can be represented on the grid.
    """
    config = config or StageConfig()
    if delta <= 0:
        raise ValueError("delta must be positive")
    g = triple.grid
    profile = profile or BlobProfile(g.d)
    kernel = kernel or MollifierKernel()
    t0 = time.perf_counter()
    exps = choose_parameters(config.p, config.p_tilde, config.theta, g.d)
    R0_norm = defect_norm(triple, config.time_stride, config.members)
    if params is not None:
        if params.eps is None:
            eps, eps_info = select_eps(triple, delta, config, kernel)
            params = replace(params, eps=eps)
        else:
            eps_info = {"eps": params.eps, "trace": []}
        stage = Stage(triple, replace(params, delta=delta), profile, kernel, config.resolution_tol)
        report = evaluate_stage(stage, config, M, R0_norm)
        report.eps_selection = eps_info
        report.exponents = exps.as_dict()
        report.notes.append("explicit parameters; exponent conditions not enforced")
        report.timings["total_s"] = time.perf_counter() - t0
        return stage.next_triple(), report, stage

    faithful = schedule is None
    schedule = schedule or PowerSchedule.from_exponents(exps)
    trials = []
    lam = config.lam_start
    last = None
    eps_info = None
    while lam <= config.lam_max:
        vals = schedule.at(lam)
        need = resolution_requirements(lam, vals["mu"], vals["nu"], vals["ell"], profile, config.resolution_tol)
        trial = {"lam": lam, "mu": vals["mu"], "nu": vals["nu"], "sigma": vals["sigma"],
                 "ell": vals["ell"], "N": vals["N"], "needs_n": need["n"], "needs_n_t": need["n_t"]}
        if need["n"] >= g.n or need["n_t"] > g.n_t or vals["lam"] * vals["mu"] / vals["nu"] > 0.5:
            trial["status"] = "unresolvable"
            trials.append(trial)
            if last is None and need["n"] >= g.n:
                break
            lam *= 2
            continue
        if eps_info is None:
            eps, eps_info = select_eps(triple, delta, config, kernel)
        try:
            params_l = stage_params_from(schedule, lam, delta, eps_info["eps"], exps.s, exps.kappa, faithful)
            stage = Stage(triple, params_l, profile, kernel, config.resolution_tol)
        except (ResolutionError, ValueError) as exc:
            trial["status"] = f"rejected: {exc}"
            trials.append(trial)
            lam *= 2
            continue
        report = evaluate_stage(stage, config, M, R0_norm)
        trial["status"] = "passed" if report.passed else "contract failed"
        trial["contract"] = {k: v["value"] for k, v in report.contract.items()}
        trials.append(trial)
        last = (stage, report)
        if report.passed:
            break
        lam *= 2
    if last is None:
        raise StageInfeasible(
            f"no lambda in [{config.lam_start}, {config.lam_max}] is representable on n={g.n}, n_t={g.n_t}; "
            f"first trial needs n >= {trials[0]['needs_n']:.3g}, n_t >= {trials[0]['needs_n_t']:.3g}"
            if trials else "empty lambda search", trials)
    stage, report = last
    report.lam_trials = trials
    report.eps_selection = eps_info
    report.exponents = exps.as_dict()
    report.timings["total_s"] = time.perf_counter() - t0
    return stage.next_triple(), report, stage


def delta_sequence(n: int, first: float = 1.0 / 13.0, ratio: float = 0.5) -> list:
    seq = [first * ratio ** k for k in range(n)]
    if n and sum(seq) >= 1.0 / 6.0:
        raise InvalidConfigurationError(["delta_sum"], f"sum of deltas {sum(seq):.4f} must stay below 1/6")
    return seq


@dataclass
class IterationResult:
    triples: list
    reports: list
    stopped: str | None
    convergence: dict


def run_iteration(initial: StageTriple, deltas: Sequence[float], n_stages: int,
                  config: StageConfig | None = None, params: Sequence[StageParams] | None = None,
                  schedule: PowerSchedule | None = None, profile: BlobProfile | None = None) -> IterationResult:
    """Chain stages; stops gracefully when the grid runs out of resolution."""
    config = config or StageConfig()
    if n_stages and sum(deltas[:n_stages]) >= 1.0 / 6.0:
        raise InvalidConfigurationError(["delta_sum"], "sum of deltas must stay below 1/6")
    triples, reports = [initial], []
    stopped = None
    M = None
    for k in range(n_stages):
        try:
            p_k = None if params is None else params[k]
            nxt, rep, _ = run_stage(triples[-1], deltas[k], config, schedule=schedule, params=p_k, M=M,
                                    profile=profile)
        except (StageInfeasible, ResolutionError) as exc:
            stopped = f"stage {k + 1}: {exc}"
            break
        M = rep.M if M is None else M
        triples.append(nxt)
        reports.append(rep)
    return IterationResult(triples, reports, stopped, convergence_report(triples, deltas, config))


def convergence_report(triples: Sequence[StageTriple], deltas: Sequence[float], config: StageConfig) -> dict:
    first, last = triples[0], triples[-1]
    n = len(triples) - 1
    budget = float(sum(deltas[:n]))
    dist = 0.0
    final = {}
    for i, smp in enumerate(first.ensemble):
        for t in first.sample_times(i, config.time_stride):
            dist = max(dist, lebesgue_norm(last.rho[i](t) - first.rho[i](t), config.p))
        if smp.stop.tau >= 1.0:
            final[str(smp.seed)] = lebesgue_norm(last.rho[i](1.0), config.p)
    defects = [defect_norm(tr, config.time_stride) for tr in triples]
    return {"stages": n, "delta_budget": budget, "rho_distance": dist,
            "rho_distance_ok": dist <= budget + 1e-12,
            "final_norms_on_tau_1": final,
            "final_norm_ok": all(v >= 1 - budget - 1e-8 for v in final.values()),
            "defect_norms": defects}
