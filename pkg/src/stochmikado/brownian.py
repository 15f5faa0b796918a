"""Brownian paths, Hoelder stopping times and time-mollified paths.

A sampled path is treated as its piecewise-linear interpolant, extended by 0
for t < 0.  For such a path the Hoelder seminorm over a time window equals the
maximum over grid pairs, and the one-sided mollification B_l = B * chi_l has a
closed form through antiderivatives of chi, so both mollification bounds hold
exactly rather than up to quadrature error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.polynomial import chebyshev
from scipy import integrate

from .spectral_grid import ResolutionError, TimeField, time_bump, time_bump_dot

CALIBRATION_SEED_BASE = 7_919_000


@dataclass(frozen=True, eq=False)
class BrownianPath:
    seed: int | None
    times: np.ndarray
    values: np.ndarray  # shape (n_t, d)

    def __post_init__(self):
        self.values.flags.writeable = False
        self.times.flags.writeable = False

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n_t(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def at(self, t):
        """Piecewise-linear value; 0 before time 0, frozen after the last sample."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        out = np.stack([np.interp(t, self.times, self.values[:, i], left=0.0, right=self.values[-1, i])
                        for i in range(self.d)], axis=-1)
        out[t < self.times[0]] = 0.0
        return out[0] if scalar else out

    def with_tail_replaced(self, t_cut: float, seed: int) -> "BrownianPath":
        """Same path up to t_cut, fresh increments afterwards (adaptedness checks)."""
        k = int(np.searchsorted(self.times, t_cut, side="right"))
        rng = np.random.default_rng(seed)
        inc = rng.normal(0.0, math.sqrt(self.dt), (self.n_t - k, self.d))
        vals = self.values.copy()
        vals[k:] = vals[k - 1] + np.cumsum(inc, axis=0)
        return BrownianPath(None, self.times.copy(), vals)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"B{i + 1}" for i in range(self.d)])
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "BrownianPath":
        with open(path) as fh:
            first = fh.readline().strip()
            seed_txt = first.split("=", 1)[1]
            seed = None if seed_txt == "None" else int(seed_txt)
            rows = list(csv.reader(fh))[1:]
        arr = np.array([[float(x) for x in r] for r in rows])
        return cls(seed, arr[:, 0].copy(), arr[:, 1:].copy())


def sample_path(seed: int, n_t: int, d: int) -> BrownianPath:
    if n_t < 2:
        raise ValueError("need at least two time points")
    times = np.linspace(0.0, 1.0, n_t)
    rng = np.random.default_rng(seed)
    inc = rng.normal(0.0, math.sqrt(times[1]), (n_t - 1, d))
    values = np.vstack([np.zeros((1, d)), np.cumsum(inc, axis=0)])
    return BrownianPath(seed, times, values)


def zero_path(n_t: int, d: int) -> BrownianPath:
    return BrownianPath(None, np.linspace(0.0, 1.0, n_t), np.zeros((n_t, d)))


def _lags(n: int, dyadic: bool):
    if not dyadic:
        return range(1, n)
    lags, L = [], 1
    while L < n:
        lags.append(L)
        L *= 2
    return lags


def holder_profile(values: np.ndarray, dt: float, exponent: float, dyadic: bool = False) -> np.ndarray:
    """S[..., k] = max over grid pairs i < j <= k of |B_j - B_i| / (t_j - t_i)^exponent.

    `values` has shape (..., n_t, d).  With `dyadic=True` only power-of-two lags
    are scanned (a lower bound, for very long paths).
    """
    if not 0 < exponent < 1:
        raise ValueError("Hoelder exponent must lie in (0, 1)")
    n = values.shape[-2]
    best = np.zeros(values.shape[:-2] + (n,))
    for L in _lags(n, dyadic):
        diff = values[..., L:, :] - values[..., :-L, :]
        ratio = np.sqrt(np.sum(diff * diff, axis=-1)) / (L * dt) ** exponent
        np.maximum(best[..., L:], ratio, out=best[..., L:])
    return np.maximum.accumulate(best, axis=-1)


def holder_seminorm(path: BrownianPath, exponent: float, t_max: float = 1.0, dyadic: bool = False) -> float:
    if not 0.0 <= t_max <= 1.0:
        raise ValueError("t_max must lie in [0, 1]")
    k = int(np.searchsorted(path.times, t_max + 1e-12, side="right")) - 1
    prof = holder_profile(path.values, path.dt, exponent, dyadic)
    return float(prof[k])


@dataclass(frozen=True)
class StoppingData:
    kappa: float
    L: float
    tau: float
    index: int


def stopping_time(path: BrownianPath, L: float, kappa: float) -> StoppingData:
    """First grid time at which the C^(1/2 - kappa) seminorm exceeds L, else 1."""
    if not 0 < kappa < 0.5:
        raise ValueError("kappa must lie in (0, 1/2)")
    prof = holder_profile(path.values, path.dt, 0.5 - kappa)
    over = np.nonzero(prof > L)[0]
    k = int(over[0]) if len(over) else path.n_t - 1
    return StoppingData(kappa, float(L), float(path.times[k]), k)


def calibration_seminorms(kappa: float, n_paths: int, n_t: int, d: int,
                          seed_base: int = CALIBRATION_SEED_BASE, chunk: int = 250) -> np.ndarray:
    out = []
    for lo in range(0, n_paths, chunk):
        batch = np.stack([sample_path(seed_base + i, n_t, d).values
                          for i in range(lo, min(lo + chunk, n_paths))])
        out.append(holder_profile(batch, 1.0 / (n_t - 1), 0.5 - kappa)[:, -1])
    return np.concatenate(out)


def calibrate_L(p: float, kappa: float, n_paths: int = 2000, n_t: int = 512, d: int = 2,
                seed_base: int = CALIBRATION_SEED_BASE) -> float:
    """Empirical p-quantile of the whole-interval seminorm over an independent batch."""
    if not 0 <= p < 1:
        raise ValueError("probability level must lie in [0, 1)")
    S = calibration_seminorms(kappa, n_paths, n_t, d, seed_base)
    return float(np.quantile(S, p, method="higher"))


def kappa_admissible(kappa: float, d: int, s_prime: float) -> bool:
    return 0 < kappa < 0.5 and (0.5 + kappa) / (0.5 - kappa) < d / s_prime


# ---------------------------------------------------------------- mollified paths

@lru_cache(maxsize=None)
def _chi_antiderivatives():
    mass = integrate.quad(lambda u: float(time_bump(u)), 0, 1, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
    chi = chebyshev.Chebyshev.interpolate(lambda u: time_bump(u) / mass, 200, domain=[0, 1])
    first = chi.integ(lbnd=0)
    xchi = chebyshev.Chebyshev.interpolate(lambda u: u * time_bump(u) / mass, 200, domain=[0, 1])
    second = xchi.integ(lbnd=0)
    return mass, first, second, float(first(1.0)), float(second(1.0))


def _X0(u):
    _, first, _, total, _ = _chi_antiderivatives()
    u = np.asarray(u, float)
    return np.where(u <= 0, 0.0, np.where(u >= 1, total, first(np.clip(u, 0, 1))))


def _X1(u):
    _, _, second, _, total = _chi_antiderivatives()
    u = np.asarray(u, float)
    return np.where(u <= 0, 0.0, np.where(u >= 1, total, second(np.clip(u, 0, 1))))


def chi_velocity_constant(exponent: float) -> float:
    """Integral of u^exponent |chi'(u)| over (0, 1) for the normalised time kernel."""
    mass = _chi_antiderivatives()[0]
    return integrate.quad(lambda u: u ** exponent * abs(float(time_bump_dot(u))) / mass, 0, 1,
                          epsabs=1e-14, epsrel=1e-12, limit=200)[0]


@dataclass(frozen=True, eq=False)
class MollifiedPath:
    path: BrownianPath
    ell: float

    def _weights(self, s, order: int):
        ell = self.ell
        s = np.asarray(s, float)
        if order == 0:
            pos = np.maximum(s, 0.0)
            return pos * _X0(pos / ell) - ell * _X1(pos / ell)
        return _X0(np.maximum(s, 0.0) / ell)

    def _convolve(self, t, order: int):
        p = self.path
        dt = p.dt
        t = np.atleast_1d(np.asarray(t, float))
        out = np.zeros((len(t), p.d))
        r = t / dt
        # on a grid time, use exact offsets so no later sample picks up a roundoff weight
        on_grid = np.abs(r - np.round(r)) < 1e-9
        k_top = np.where(on_grid, np.round(r), np.floor(r) + 1).astype(int)
        k_hi = np.minimum(k_top, p.n_t - 1)
        M = int(math.ceil(self.ell / dt)) + 3
        for o in range(M + 1):
            k = k_hi - o
            ok = k >= 0
            if not np.any(ok):
                break
            kk = np.where(ok, k, 0)
            s = np.where(on_grid, (np.round(r) - kk) * dt, t - p.times[kk])
            h = (self._weights(s + dt, order) - 2 * self._weights(s, order) + self._weights(s - dt, order)) / dt
            out += np.where(ok, h, 0.0)[:, None] * p.values[kk]
        return out

    def at(self, t):
        t_arr = np.asarray(t, float)
        out = self._convolve(t_arr, 0)
        return out[0] if t_arr.ndim == 0 else out

    def velocity(self, t):
        t_arr = np.asarray(t, float)
        out = self._convolve(t_arr, 1)
        return out[0] if t_arr.ndim == 0 else out


def mollify_path(path: BrownianPath, ell: float) -> MollifiedPath:
    """B_l(t) = int B(t - s) chi_l(s) ds with chi_l supported in (0, l)."""
    if ell < 2 * path.dt:
        raise ResolutionError(f"path mollification scale {ell} is below two time steps ({path.dt})")
    return MollifiedPath(path, float(ell))


def shift_by_path(F: TimeField, path, sign: int = 1) -> TimeField:
    """(F o Psi)(t, x) = F(t, x + sign * B(t)); `path` may be raw or mollified."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")

    def evaluator(t):
        return F.at_shift(t, sign * np.asarray(path.at(t), float))

    return TimeField(F.grid, evaluator)
