"""Weak-form checks for constructed triples and for the stochastic transport equation.

All pairings against test functions are grid quadratures, exact for the
band-limited bank as long as the paired field is resolved.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .brownian import BrownianPath
from .spectral_grid import (GridSpec, ScalarField, VectorField, lebesgue_norm, random_bandlimited,
                            sobolev_norm)


# ---------------------------------------------------------------- test functions

class TestFunctionBank:
    """Real trigonometric modes with |k|_inf <= kmax, the constant, and a smooth bump.

    The bump is a periodised Gaussian truncated to |k|_inf <= bump_band, so
    every member is band-limited and its derivatives are exact.
    """

    __test__ = False  # not a pytest class

    def __init__(self, grid: GridSpec, kmax: int = 2, bump: bool = True, bump_width: float = 0.12,
                 bump_band: int = 8):
        if 2 * max(kmax, bump_band if bump else 0) >= grid.n // 2:
            raise ValueError("test functions are not resolved on this grid")
        self.grid = grid
        names, coeffs = [], []
        for k in np.ndindex(*[2 * kmax + 1] * grid.d):
            kv = tuple(int(x) - kmax for x in k)
            first = next((x for x in kv if x != 0), 0)
            if first < 0:
                continue
            if all(x == 0 for x in kv):
                names.append("const")
                coeffs.append(("const", kv))
                continue
            names.append(f"cos{kv}")
            coeffs.append(("cos", kv))
            names.append(f"sin{kv}")
            coeffs.append(("sin", kv))
        x = grid.coords
        phis, grads, laps = [], [], []
        for kind, kv in coeffs:
            arg = sum(2 * math.pi * kv[m] * x[m] for m in range(grid.d))
            arg = np.broadcast_to(arg, grid.shape)
            ksq = 4 * math.pi ** 2 * sum(v * v for v in kv)
            if kind == "const":
                phis.append(np.ones(grid.shape))
                grads.append(np.zeros((grid.d,) + grid.shape))
                laps.append(np.zeros(grid.shape))
            elif kind == "cos":
                phis.append(np.cos(arg))
                grads.append(np.stack([-2 * math.pi * kv[m] * np.sin(arg) for m in range(grid.d)]))
                laps.append(-ksq * np.cos(arg))
            else:
                phis.append(np.sin(arg))
                grads.append(np.stack([2 * math.pi * kv[m] * np.cos(arg) for m in range(grid.d)]))
                laps.append(-ksq * np.sin(arg))
        if bump:
            names.append("bump")
            r2 = 0.0
            for xm in x:
                dx = np.minimum(np.abs(xm - 0.5), 1 - np.abs(xm - 0.5))
                r2 = r2 + dx * dx
            raw = ScalarField(grid, np.broadcast_to(np.exp(-r2 / (2 * bump_width ** 2)), grid.shape).copy())
            spec = raw.spectral * (grid.kinf <= bump_band)
            b = ScalarField.from_spectral(grid, spec)
            phis.append(b.values)
            grads.append(np.stack([ScalarField.from_spectral(grid, spec * 2j * math.pi * k).values
                                   for k in grid.deriv_wavenumbers]))
            laps.append(ScalarField.from_spectral(grid, -spec * 4 * math.pi ** 2 * grid.ksq_full).values)
        self.names = names
        self.phi = np.stack(phis)
        self.grad = np.stack(grads)
        self.lap = np.stack(laps)

    def __len__(self) -> int:
        return len(self.names)

    def pair(self, f: ScalarField) -> np.ndarray:
        """int f phi_m dx for every bank member."""
        return np.mean(self.phi * f.values, axis=tuple(range(1, self.grid.d + 1)))

    def pair_grad(self, F: VectorField) -> np.ndarray:
        """int F . grad phi_m dx."""
        prod = np.sum(self.grad * F.values[None], axis=1)
        return np.mean(prod, axis=tuple(range(1, self.grid.d + 1)))

    def pair_partials(self, f: ScalarField) -> np.ndarray:
        """int f d_i phi_m dx as an array (m, i)."""
        return np.mean(self.grad * f.values[None, None], axis=tuple(range(2, self.grid.d + 2)))

    def pair_lap(self, f: ScalarField) -> np.ndarray:
        return np.mean(self.lap * f.values, axis=tuple(range(1, self.grid.d + 1)))


# ---------------------------------------------------------------- time quadrature

def time_rule(grid_times: np.ndarray, t: float, quadrature: str = "trapezoid", nodes: int = 3):
    """Nodes and weights on [0, t] built on the time grid (t must be a grid time)."""
    k = int(np.argmin(np.abs(grid_times - t)))
    if abs(grid_times[k] - t) > 1e-12:
        raise ValueError("t must lie on the time grid")
    ts = grid_times[: k + 1]
    if k == 0:
        return np.array([0.0]), np.array([0.0])
    if quadrature == "trapezoid":
        w = np.zeros(k + 1)
        dt = np.diff(ts)
        w[:-1] += dt / 2
        w[1:] += dt / 2
        return ts, w
    if quadrature == "gauss":
        x, wx = np.polynomial.legendre.leggauss(nodes)
        a, b = ts[:-1, None], ts[1:, None]
        pts = (0.5 * (b - a) * (x[None] + 1) + a).ravel()
        wts = (0.5 * (b - a) * wx[None]).ravel()
        return pts, wts
    raise ValueError(f"unknown quadrature {quadrature!r}")


# ---------------------------------------------------------------- residuals

def continuity_defect_residual(rho: Callable, u_shifted: Callable, R: Callable, bank: TestFunctionBank,
                               t: float, grid_times: np.ndarray, quadrature: str = "trapezoid",
                               nodes: int = 3, diffusion: bool = False) -> np.ndarray:
    """|int rho(t) phi - int rho(0) phi - int int (rho u(Psi) + R) . grad phi [- int int rho lap phi]|.

    `rho`, `u_shifted`, `R` map a time to fields; u_shifted is u(t, x + B(t)).
    Returns one value per bank member.
    """
    pts, wts = time_rule(grid_times, t, quadrature, nodes)
    acc = np.zeros(len(bank))
    for s, w in zip(pts, wts):
        if w == 0.0:
            continue
        r = rho(s)
        acc += w * (bank.pair_grad(u_shifted(s) * r) + bank.pair_grad(R(s)))
        if diffusion:
            acc += w * bank.pair_lap(r)
    res = bank.pair(rho(t)) - bank.pair(rho(0.0)) - acc
    return np.abs(res)


def triple_residual(triple, i: int, bank: TestFunctionBank, t: float, quadrature: str = "trapezoid",
                    nodes: int = 3) -> np.ndarray:
    """continuity_defect_residual for member i of a stage triple."""
    return continuity_defect_residual(lambda s: triple.rho[i](s), lambda s: triple.u_shifted(i, s),
                                      lambda s: triple.R[i](s), bank, t, triple.grid.times,
                                      quadrature, nodes, triple.diffusion)


def ste_weak_residual(rho: Callable, u: Callable, path: BrownianPath, bank: TestFunctionBank,
                      t: float, times: np.ndarray | None = None) -> np.ndarray:
    """Weak residual of d rho + u . grad rho dt = (grad rho) o dB in Ito form.

    int rho(t) phi - int rho(0) phi - int int rho u . grad phi ds
      - sum_i int (int rho d_i phi dx) dB^i - 1/2 int int rho lap phi ds,

    with a left-point sum for the stochastic integral and trapezoids for ds.
    `rho(s)` and `u(s)` are evaluated in the unshifted frame.
    """
    times = path.times if times is None else np.asarray(times)
    k = int(np.argmin(np.abs(times - t)))
    ts = times[: k + 1]
    Bs = path.at(ts)
    lebesgue = np.zeros(len(bank))
    ito = np.zeros(len(bank))
    prev_val = None
    for m, s in enumerate(ts):
        r = rho(s)
        val = bank.pair_grad(u(s) * r) + 0.5 * bank.pair_lap(r)
        if m > 0:
            lebesgue += 0.5 * (ts[m] - ts[m - 1]) * (val + prev_val)
        prev_val = val
        if m < len(ts) - 1:
            ito += bank.pair_partials(r) @ (Bs[m + 1] - Bs[m])
    res = bank.pair(rho(ts[-1])) - bank.pair(rho(ts[0])) - lebesgue - ito
    return np.abs(res)


def shifted_profile(g_field: ScalarField, path: BrownianPath) -> Callable:
    """rho(t, x) = g(x - B(t)) through an exact spectral phase."""
    grid = g_field.grid
    spec = g_field.spectral

    def rho(t):
        y = path.at(t)
        phase = np.exp(-2j * math.pi * sum(k * yi for k, yi in zip(grid.wavenumbers, y)))
        return ScalarField.from_spectral(grid, spec * phase)

    return rho


def unshift(triple, i: int) -> tuple:
    """(rho(t, x) = rho~(t, x - B(t)), u) for member i, via exact phases on resolved fields."""
    path = triple.ensemble[i].path
    grid = triple.grid

    def rho(t):
        y = path.at(t)
        f = triple.rho[i](t)
        phase = np.exp(-2j * math.pi * sum(k * yi for k, yi in zip(grid.wavenumbers, y)))
        return ScalarField.from_spectral(grid, f.spectral * phase)

    def u(t):
        return triple.u(t)

    return rho, u


def ito_refinement(g_field: ScalarField, n_fine: int, levels: Sequence[int], seeds: Sequence[int],
                   bank: TestFunctionBank, t: float = 1.0) -> dict:
    """Mean Ito-sum residual of the exact solution g(x - B(t)) on coarsened grids.

    One fine path per seed is subsampled by each factor in `levels`; the
    residual is the sup over the bank.  Returns the mean error per time step and
    the fitted log-log slope.
    """
    from .brownian import sample_path
    d = g_field.grid.d
    errors = {}
    for factor in levels:
        errs = []
        for sd in seeds:
            fine = sample_path(int(sd), n_fine, d)
            idx = np.arange(0, n_fine, factor)
            coarse = BrownianPath(None, fine.times[idx].copy(), fine.values[idx].copy())
            rho = shifted_profile(g_field, coarse)
            zero = VectorField.zeros(g_field.grid)
            errs.append(float(np.max(ste_weak_residual(rho, lambda s: zero, coarse, bank, t))))
        errors[float(fine.times[factor])] = float(np.mean(errs))
    dts = np.array(sorted(errors))
    vals = np.array([errors[k] for k in dts])
    slope = float(np.polyfit(np.log(dts), np.log(vals), 1)[0])
    return {"dt": dts.tolist(), "mean_error": vals.tolist(), "slope": slope}


# ---------------------------------------------------------------- momentum

def momentum_distance(triple0, triple1, i: int, stride: int = 1) -> float:
    """max over sample times t <= tau of ||rho_1 u_1(Psi) - rho_0 u_0(Psi)||_{L^1}."""
    worst = 0.0
    for t in triple0.sample_times(i, stride):
        a = triple1.u_shifted(i, t) * triple1.rho[i](t)
        b = triple0.u_shifted(i, t) * triple0.rho[i](t)
        worst = max(worst, lebesgue_norm(a - b, 1))
    return worst


# ---------------------------------------------------------------- interpolation

@dataclass
class InterpolationReport:
    theta: float
    q: float
    ratios: list
    C: float

    def stability(self, other: "InterpolationReport") -> float:
        return abs(other.C - self.C) / self.C


def interpolation_ratio(f: ScalarField, theta: float, q: float) -> float:
    """||f||_{W^{theta,q}} / (||f||_{L^q}^(1-theta) ||f||_{W^{1,q}}^theta)."""
    if not 1 < q < math.inf:
        raise ValueError(f"interpolation needs 1 < q < inf, got {q}")
    num = sobolev_norm(f, theta, q)
    den = lebesgue_norm(f, q) ** (1 - theta) * sobolev_norm(f, 1.0, q) ** theta
    return num / den


def single_mode_ratio(grid: GridSpec, theta: float, q: float, k: int = 1) -> float:
    """Closed form for sin(2 pi k x_0): the three multiplier values at |k|."""
    m = lambda th: (1 + 4 * math.pi ** 2 * k * k) ** (th / 2)
    return m(theta) / (m(0) ** (1 - theta) * m(1) ** theta)


def interpolation_check(grid: GridSpec, n_fields: int, theta: float, q: float, seed: int = 0,
                        kmax: int = 6) -> InterpolationReport:
    """Largest interpolation ratio over random band-limited fields."""
    if not 1 < q < math.inf:
        raise ValueError(f"interpolation needs 1 < q < inf, got {q}")
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    ratios = [interpolation_ratio(random_bandlimited(grid, rng, kmax, decay=0.0), theta, q)
              for _ in range(n_fields)]
    if not all(math.isfinite(r) for r in ratios):
        raise FloatingPointError("non-finite interpolation ratio")
    return InterpolationReport(theta, q, ratios, max(ratios))


# ---------------------------------------------------------------- nonuniqueness

class InconclusiveCertificate(RuntimeError):
    pass


@dataclass
class Certificate:
    stages: int
    seeds: list
    fraction_tau_one: float
    final_norms: dict
    threshold: float
    final_norm_ok: bool
    initial_max_abs: float
    ste_residual: dict
    ste_residual_zero: dict
    defect_norms: list
    momentum_finite: bool
    stopped: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


def nonuniqueness_exhibit(triples: Sequence, p: float, bank: TestFunctionBank,
                          stride: int = 1, stopped: str | None = None,
                          members: int | None = None) -> Certificate:
    """Certificate for the pair (rho, 0) built from the last triple of a trajectory.

    rho(t, x) = rho~(t, x - B(t)) and the zero density share the deterministic u
    and vanish at t = 0.  Residuals are evaluated for every stage of the
    trajectory so that their decay can be inspected.  `members` limits the
    STE residuals (the expensive part) to the first few tau = 1 members.
    """
    last = triples[-1]
    ens = last.ensemble
    ones = [i for i, smp in enumerate(ens) if smp.stop.tau >= 1.0]
    if not ones:
        raise InconclusiveCertificate("no ensemble member reached tau = 1; raise L or the ensemble size")
    n_stages = len(triples) - 1
    final = {str(ens[i].seed): lebesgue_norm(last.rho[i](1.0), p) for i in ones}
    from .iteration_stage import defect_norm
    defects = [defect_norm(tr, stride) for tr in triples]
    ste = {}
    ste_zero = {}
    for i in ones[:members]:
        per_stage = []
        for tr in triples:
            rho, u = unshift(tr, i)
            per_stage.append(float(np.max(ste_weak_residual(rho, u, ens[i].path, bank, 1.0))))
        ste[str(ens[i].seed)] = per_stage
        zero_s = ScalarField.zeros(last.grid)
        zero_v = VectorField.zeros(last.grid)
        ste_zero[str(ens[i].seed)] = float(np.max(ste_weak_residual(lambda s: zero_s, lambda s: zero_v,
                                                                    ens[i].path, bank, 1.0)))
    init = max(last.rho[i](0.0).max_abs() for i in range(len(ens)))
    budget_threshold = 5.0 / 6.0
    mom_ok = True
    for i in ones:
        for t in last.sample_times(i, max(stride, 1)):
            if not math.isfinite(lebesgue_norm(last.u_shifted(i, t) * last.rho[i](t), 1)):
                mom_ok = False
    return Certificate(stages=n_stages, seeds=[s.seed for s in ens], fraction_tau_one=len(ones) / len(ens),
                       final_norms=final, threshold=budget_threshold,
                       final_norm_ok=all(v >= budget_threshold - 0.05 for v in final.values()),
                       initial_max_abs=init, ste_residual=ste, ste_residual_zero=ste_zero,
                       defect_norms=defects, momentum_finite=mom_ok, stopped=stopped)


def write_certificate(cert: Certificate, directory) -> tuple:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jpath = directory / "certificate.json"
    jpath.write_text(json.dumps(cert.to_json(), indent=2, sort_keys=True))
    cpath = directory / "certificate.csv"
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "defect_norm", "mean_ste_residual"])
        for k, dn in enumerate(cert.defect_norms):
            vals = [v[k] for v in cert.ste_residual.values()]
            w.writerow([k, repr(dn), repr(float(np.mean(vals))) if vals else ""])
    return jpath, cpath
