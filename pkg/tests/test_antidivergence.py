import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmikado.antidivergence import (AntidivOrder, MeanViolationError, antidiv_decay_probe, fit_loglog,
                                        improved_antidiv, std_antidiv)
from stochmikado.spectral_grid import (GridSpec, ScalarField, derivative, dilate, divergence, lebesgue_norm)

from conftest import band

G = GridSpec(2, 64, 17)
X0, X1 = np.broadcast_arrays(*G.coords)
seeds = st.integers(0, 2 ** 31 - 1)
orders = st.sampled_from([1, 2, 3])


def mean_zero(seed, kmax=4):
    return band(G, seed, kmax, mean_zero=True)


def test_single_mode_inversion():
    f = ScalarField(G, np.cos(2 * math.pi * X0))
    v = std_antidiv(f)
    assert np.allclose(v.values[0], np.sin(2 * math.pi * X0) / (2 * math.pi), atol=1e-14)
    assert np.allclose(v.values[1], 0.0, atol=1e-14)
    assert std_antidiv(ScalarField.zeros(G)).max_abs() == 0.0


def test_mean_violation():
    with pytest.raises(MeanViolationError):
        std_antidiv(ScalarField.constant(G, 1.0))
    with pytest.raises(MeanViolationError):
        improved_antidiv(mean_zero(1), ScalarField.constant(G, 0.3))
    with pytest.raises(ValueError):
        AntidivOrder(0)


@given(seeds)
def test_div_of_antidiv_is_identity(seed):
    f = mean_zero(seed, 8)
    v = std_antidiv(f)
    assert np.max(np.abs(divergence(v).values - f.values)) < 1e-10
    # lowest nonzero frequency has |k| = 1
    assert lebesgue_norm(v, 2) <= lebesgue_norm(f, 2) / (2 * math.pi) * (1 + 1e-12)


@given(seeds, orders)
def test_improved_divergence_identity(seed, N):
    f, g = band(G, seed, 3), mean_zero(seed + 1, 3)
    R = improved_antidiv(f, g, N)
    fg = f * g
    assert np.max(np.abs(divergence(R).values - (fg.values - fg.mean))) < 1e-8


@given(seeds, orders, st.sampled_from([0, 1]))
def test_leibniz_rule(seed, N, axis):
    f, g = band(G, seed, 3), mean_zero(seed + 1, 3)
    lhs = derivative(improved_antidiv(f, g, N), axis)
    rhs = improved_antidiv(derivative(f, axis), g, N) + improved_antidiv(f, derivative(g, axis), N)
    assert np.max(np.abs(lhs.values - rhs.values)) < 1e-8


@given(seeds, orders, st.floats(-3, 3), st.floats(-3, 3))
def test_bilinear(seed, N, a, b):
    f1, f2 = band(G, seed, 3), band(G, seed + 7, 3)
    g1, g2 = mean_zero(seed + 1, 3), mean_zero(seed + 2, 3)
    lhs = improved_antidiv(f1 * a + f2 * b, g1, N)
    rhs = improved_antidiv(f1, g1, N) * a + improved_antidiv(f2, g1, N) * b
    assert np.max(np.abs(lhs.values - rhs.values)) < 1e-10 * (1 + abs(a) + abs(b))
    lhs = improved_antidiv(f1, g1 * a + g2 * b, N)
    rhs = improved_antidiv(f1, g1, N) * a + improved_antidiv(f1, g2, N) * b
    assert np.max(np.abs(lhs.values - rhs.values)) < 1e-10 * (1 + abs(a) + abs(b))


def test_constant_first_argument_collapses():
    g = mean_zero(5, 3)
    for N in (1, 2, 3):
        R = improved_antidiv(ScalarField.constant(G, 2.5), g, N)
        assert np.allclose(R.values, 2.5 * std_antidiv(g).values, atol=1e-14)
    assert improved_antidiv(band(G, 2, 3), ScalarField.zeros(G), 2).max_abs() == 0.0


def test_decay_probe():
    g256 = GridSpec(2, 256, 8)
    x0, x1 = np.broadcast_arrays(*g256.coords)
    f = ScalarField(g256, 1.0 + 0.3 * np.cos(2 * math.pi * x0) + 0.2 * np.sin(2 * math.pi * x1))
    g = ScalarField(g256, np.cos(2 * math.pi * x1))
    rep = antidiv_decay_probe(f, g, [8, 16, 32, 64], N=1)
    assert rep.slope == pytest.approx(-1.0, abs=0.2)
    const = antidiv_decay_probe(ScalarField.constant(g256, 1.5), g, [8, 16, 32, 64])
    assert const.slope == pytest.approx(-1.0, abs=1e-10)
    direct = [1.5 * lebesgue_norm(std_antidiv(dilate(g, lam)), 2) for lam in (8, 16, 32, 64)]
    assert np.allclose(const.norms, direct, rtol=1e-12)
    zero = antidiv_decay_probe(f, ScalarField.zeros(g256), [8, 16, 32])
    assert zero.degenerate and zero.slope is None
    with pytest.raises(ValueError):
        antidiv_decay_probe(f, g, [8, 16])


def test_fit_loglog_exact():
    assert fit_loglog([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0, abs=1e-12)
