import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmikado.mikado_blocks import (BlobProfile, BlockParams, MikadoBlocks, block_norm,
                                       cross_supports_vanish, interaction_means, mikado_estimate_probe,
                                       mikado_identity_check, predicted_exponents, shift_separation)
from stochmikado.spectral_grid import GridSpec, ResolutionError, derivative, divergence, lebesgue_norm

S = 12 / 5
G256 = GridSpec(2, 256, 8)
G512 = GridSpec(2, 512, 8)


def blocks(grid=G256, lam=1, mu=1, sigma=1.0, nu=8, N=1, tol=1e-6):
    return MikadoBlocks(grid, BlockParams(lam, mu, sigma, nu, S, N=N), resolution_tol=tol)


def test_params_guard():
    with pytest.raises(ValueError):
        BlockParams(2, 1, 1.0, 3, S)        # nu not a multiple of lam
    with pytest.raises(ValueError):
        BlockParams(1, 4, 1.0, 6, S)        # lam mu / nu > 1/2
    with pytest.raises(ValueError):
        BlockParams(1, 1, 1.0, 4, 0.9)
    with pytest.raises(ResolutionError):
        blocks(GridSpec(2, 64, 8), nu=8)


def test_profile_shifts_separate_tubes():
    prof = BlobProfile(2)
    assert shift_separation(prof.shifts) > 2 * prof.radius
    with pytest.raises(ValueError):
        BlobProfile(2, shifts=((0.0, 0.0), (0.1, 0.0)))


def test_blob_unit_pairing_and_psi():
    bl = blocks(G512, mu=2, nu=8)
    for j in range(2):
        dens, _, _ = bl.blob(j, 0.0, variant="density")
        fld, _, _ = bl.blob(j, 0.0, variant="field")
        assert np.mean(dens * fld) == pytest.approx(1.0, abs=1e-8)
        psi = bl.psi(j)
        assert abs(np.mean(psi)) < 1e-14 and np.mean(psi ** 2) == pytest.approx(1.0, abs=1e-14)
        # b is evaluated at nu x, so its x-divergence carries a factor nu
        b = bl.potential_b(j)
        assert np.max(np.abs(divergence(b).values / bl.params.nu - psi)) < 1e-10
        assert derivative(b, j).max_abs() < 1e-12


@pytest.mark.parametrize("k", [0, 1])
def test_blob_mu_scaling(k):
    grid = GridSpec(2, 1024, 8)
    for r in (1.0, 2.0, math.inf):
        ratios = []
        for mu in (1, 2, 4):
            bl = MikadoBlocks(grid, BlockParams(1, mu, 1.0, 8, S), resolution_tol=1e-6)
            val, grad, _ = bl.blob(0, 0.0, order=k)
            arr = np.abs(val) if k == 0 else np.sqrt(sum(gi ** 2 for gi in grad))
            norm = arr.max() if r == math.inf else np.mean(arr ** r) ** (1 / r)
            dr = 0.0 if r == math.inf else 2 / r
            ratios.append(norm / mu ** (2 / S - dr + k))
        assert max(ratios) / min(ratios) < 1.05


@given(st.sampled_from([1, 2, 3]), st.floats(0, 1))
def test_identities(N, t):
    bl = blocks(nu=8, sigma=2.0, N=N)
    rep = mikado_identity_check(bl, [t])
    assert rep.density_transport <= 1e-8 and rep.potential <= 1e-8 and rep.corrector <= 1e-9


@given(st.floats(0, 1))
def test_interactions(t):
    # the mean identity needs 2 nu beyond the spectral extent of the blob pair
    bl = blocks(nu=32, sigma=3.0)
    M = interaction_means(bl, t)
    assert np.allclose(np.diag(M), 1.0, atol=1e-8)
    assert cross_supports_vanish(bl, t)
    for j in range(2):
        assert float(np.mean(bl.theta(j, t).values)) == pytest.approx(float(np.mean(bl.theta(j, 0.0).values)),
                                                                     abs=1e-12)


def test_time_is_pure_translation():
    bl = blocks(nu=8, sigma=1.7)
    for name in ("theta", "Q", "W", "W_corr", "A_N"):
        norms = [block_norm(bl, name, 0, 2.0, t=t) for t in (0.0, 0.31, 0.77)]
        assert max(norms) - min(norms) <= 1e-10 * max(norms)


def test_theta_at_zero_has_no_translation():
    bl = blocks(nu=8, sigma=5.0)
    dens, _, _ = bl.blob(0, 0.0)
    assert np.allclose(bl.theta(0, 0.0).values, dens * bl.psi(0), atol=0)


def test_predicted_exponents_table():
    p = predicted_exponents("Q", 0, 1.0, 2, S)
    assert p["sigma"] == -1 and p["mu"] == pytest.approx(0.0)
    assert predicted_exponents("theta", 1, 2.0, 2, S)["nu"] == 1


def test_interaction_mean_needs_separated_scales():
    assert abs(interaction_means(blocks(nu=8), 0.0)[0, 0] - 1.0) > 0.1


def test_sigma_slope_of_Q():
    fit = mikado_estimate_probe(G256, BlockParams(1, 1, 1.0, 8, S), "Q", "sigma", [1.0, 2.0, 4.0], 0, 1.0,
                                resolution_tol=1e-6)
    assert fit.fitted == pytest.approx(-1.0, abs=0.05)


def test_degenerate_sweep():
    with pytest.raises(ValueError):
        mikado_estimate_probe(G256, BlockParams(1, 1, 1.0, 8, S), "Q", "sigma", [1.0])
