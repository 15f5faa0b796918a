"""Antidivergence operators on the torus.

`std_antidiv` is grad(inverse Laplacian).  `improved_antidiv` is the bilinear
operator R_N(f, g) whose divergence is f g minus its mean, and which gains a
factor 1/lam per order when g oscillates at frequency lam.  The recursion:

    G = std_antidiv(g)
    R_1(f, g)     = f G - std_antidiv(grad f . G - mean)
    R_{k+1}(f, g) = f G - sum_i R_k(d_i f, G_i)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral_grid import (ScalarField, VectorField, derivative, dilate, gradient,
                            lebesgue_norm)


class MeanViolationError(ValueError):
    pass


MEAN_TOL = 1e-10


@dataclass(frozen=True)
class AntidivOrder:
    N: int = 1

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"antidivergence order must be a positive integer, got {self.N}")


def _order(N) -> int:
    return AntidivOrder(N).N if not isinstance(N, AntidivOrder) else N.N


def _check_mean(f: ScalarField, tol: float, what: str) -> None:
    m = f.mean
    if abs(m) > tol * max(1.0, f.max_abs()):
        raise MeanViolationError(f"{what} has mean {m:.3e}, antidivergence needs mean zero")


def std_antidiv(f: ScalarField, tol: float = MEAN_TOL) -> VectorField:
    _check_mean(f, tol, "argument")
    g = f.grid
    ksq = g.ksq
    inv = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=inv, where=ksq > 0)
    spec = f.spectral * inv
    coeffs = np.stack([spec * (-1j * k / (2.0 * math.pi)) for k in g.deriv_wavenumbers])
    return VectorField.from_spectral(g, coeffs)


def _remove_mean(f: ScalarField) -> ScalarField:
    return f - f.mean


def _r1(f: ScalarField, G: VectorField) -> VectorField:
    h = gradient(f).dot(G)
    return G * f - std_antidiv(_remove_mean(h))


def _rk(f: ScalarField, G: VectorField, k: int) -> VectorField:
    if k == 1:
        return _r1(f, G)
    out = G * f
    for i in range(f.grid.d):
        Gi = G.component(i)
        out = out - _rk(derivative(f, i), std_antidiv(Gi), k - 1)
    return out


def improved_antidiv(f: ScalarField, g: ScalarField, N=1, tol: float = MEAN_TOL) -> VectorField:
    """R_N(f, g): div R_N(f, g) = f g - mean(f g)."""
    f.grid.check_same(g.grid)
    _check_mean(g, tol, "second argument")
    return _rk(f, std_antidiv(g, tol), _order(N))


@dataclass
class DecayReport:
    lams: list
    norms: list
    slope: float | None
    predicted: float = -1.0
    degenerate: bool = False


def fit_loglog(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def antidiv_decay_probe(f: ScalarField, g: ScalarField, lams: Sequence[int], N=1,
                        r: float = 2.0) -> DecayReport:
    if len(lams) < 3:
        raise ValueError("decay probe needs at least three sweep points")
    norms = [lebesgue_norm(improved_antidiv(f, dilate(g, lam), N), r) for lam in lams]
    if max(norms) == 0.0:
        return DecayReport(list(lams), norms, None, degenerate=True)
    return DecayReport(list(lams), norms, fit_loglog(lams, norms))
