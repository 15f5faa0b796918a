import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from stochmikado.brownian import sample_path, stopping_time, zero_path
from stochmikado.iteration_stage import (DEFECT_TERMS, STO_TERMS, InvalidConfigurationError, Sample, Stage,
                                         StageConfig, StageInfeasible, StageParams, StageTriple,
                                         choose_exponent_s, choose_kappa, choose_parameters, defect_norm,
                                         delta_sequence, hypothesis_violations, initial_stage, make_ensemble,
                                         predicted_lambda_exponents, ramp, run_iteration, run_stage,
                                         strong_residual, validate_hypotheses)
from stochmikado.residual_verify import TestFunctionBank, triple_residual
from stochmikado.spectral_grid import (GridSpec, MollifierKernel, ScalarField, TimeField, VectorField,
                                       divergence, lebesgue_norm)

from oracles import admissible, conditions

L_CAL = 4.2221  # calibrated level for prob 0.9, kappa 0.02 (see test_brownian)


def test_default_exponents_fixture():
    # hand evaluation: 1/s window (1/3, 1/2) -> s = 12/5, s' = 12/7, d/s' = 7/6,
    # r(kappa) = 13/12 -> kappa = 1/50, alpha > 2 / (0.48/0.52 * 7/6 - 1) = 26 -> 27,
    # gamma in (28, 29.077) -> 29, beta = 31.5 + 0.5 = 32, N: N/(N-1) < 29/28 -> 30
    e = choose_parameters(2, 1.5, 0, 2)
    assert e.s == pytest.approx(12 / 5) and e.s_prime == pytest.approx(12 / 7)
    assert e.kappa == pytest.approx(1 / 50)
    assert (e.alpha, e.beta, e.gamma, e.N) == (27, 32, 29, 30)
    z_lo, z_hi = Fraction(29) / Fraction(12, 25), Fraction(7, 6) * 27 / Fraction(13, 25)
    assert e.zeta == pytest.approx(float((z_lo + z_hi) / 2))
    assert all(conditions(2, 1.5, 0, 2, e).values())


def test_s_and_kappa_examples():
    assert choose_exponent_s(2, 1.5, 0, 2) == pytest.approx(12 / 5)
    assert choose_kappa(2, 5 / 3) == pytest.approx(1 / 42)
    assert 0 < choose_kappa(2, 1.999) < 2e-4
    with pytest.raises(InvalidConfigurationError):
        choose_kappa(2, 2.0)


@st.composite
def admissible_tuples(draw):
    d = draw(st.sampled_from([2, 3]))
    theta = draw(st.sampled_from([0.0, 0.05, 0.1, 0.2]))
    pt = draw(st.floats(1.01, d / (1 + theta) - 0.05))
    p = draw(st.floats(1.0, 8.0))
    assume(admissible(p, pt, theta, d))
    assume(1 / p + 1 / pt - 1 - theta / d > 0.02)
    return p, pt, theta, d


@given(admissible_tuples())
def test_parameters_pass_independent_checker(tup):
    e = choose_parameters(*tup)
    assert conditions(*tup, e) == {k: True for k in ("s", "kappa", "alpha", "gamma", "beta", "N", "zeta")}


@pytest.mark.parametrize("tup,name", [
    ((2, 3, 0, 2), "dimension_condition"),
    ((2, 1.5, 1, 2), "dimension_condition"),
    ((4, 4, 0, 2), "sum_condition"),
    ((2, 1.5, 0, 1), "dimension"),
    ((0.5, 1.5, 0, 2), "p_range"),
    ((2, 1.5, 1.5, 2), "theta_range"),
])
def test_inadmissible_named(tup, name):
    assert name in hypothesis_violations(*tup)
    with pytest.raises(InvalidConfigurationError) as exc:
        validate_hypotheses(*tup)
    assert name in exc.value.conditions


def test_predicted_exponents_negative():
    e = choose_parameters(2, 1.5, 0, 2)
    pred = predicted_lambda_exponents(e, diffusion=True)
    assert pred["com"] == 0
    assert all(v < 0 for k, v in pred.items() if k != "com")
    assert pred["time1"] == pytest.approx(-32) and pred["quadr1"] == pytest.approx(-1)
    assert pred["diff"] == pytest.approx(e.gamma - 2 / e.s_prime * e.alpha)


def test_delta_sequence_budget():
    seq = delta_sequence(5)
    assert sum(seq) < 1 / 6
    with pytest.raises(InvalidConfigurationError):
        delta_sequence(3, first=0.1, ratio=0.9)


# ---------------------------------------------------------------- small stages

G = GridSpec(2, 128, 512)
E = choose_parameters(2, 1.5, 0, 2)
PARAMS = StageParams(delta=0.3, eps=0.08, ell=4 / 511, lam=1, mu=1, sigma=4.0, nu=8, N=1, s=E.s, kappa=E.kappa)


@pytest.fixture(scope="module")
def ensemble():
    ens = list(make_ensemble([11, 12], G, L=L_CAL, kappa=E.kappa))
    zp = zero_path(G.n_t, 2)
    ens.append(Sample(-1, zp, stopping_time(zp, L_CAL, E.kappa)))
    return tuple(ens)


@pytest.fixture(scope="module")
def triple0(ensemble):
    return initial_stage(2.0, G, ensemble)


@pytest.fixture(scope="module")
def stage(triple0):
    return Stage(triple0, PARAMS)


def test_initial_stage(triple0):
    for i in range(len(triple0.ensemble)):
        assert lebesgue_norm(triple0.rho[i](1.0), 2) == pytest.approx(1.0, abs=1e-8)
        for t in G.times[G.times <= 1 / 3]:
            assert triple0.rho[i](t).max_abs() == 0.0 and triple0.R[i](t).max_abs() == 0.0
    assert ramp(0.0) == 0.0 and ramp(2 / 3) == 1.0


def test_initial_weak_residual_gauss(triple0):
    bank = TestFunctionBank(G)
    for k in (200, 255, 300, 511):
        assert triple_residual(triple0, 0, bank, G.times[k], "gauss").max() <= 1e-8


@pytest.mark.xfail(strict=True, reason="trapezoid error mid-ramp is ~7e-8 at 512 time points")
def test_initial_weak_residual_trapezoid(triple0):
    bank = TestFunctionBank(G)
    assert max(triple_residual(triple0, 0, bank, G.times[k]).max() for k in (230, 255)) <= 1e-8


def test_stage_invariants(stage):
    for t in (0.5, 0.8):
        for i in range(3):
            snap = stage.snapshot(i, t)
            assert snap.rho1.mean == pytest.approx(snap.rho_eps.mean, abs=1e-10)
            assert abs(snap.vartheta.mean + snap.vartheta_c) < 1e-12 and abs(snap.q.mean + snap.q_c) < 1e-12
            total = sum((snap.terms[k] for k in DEFECT_TERMS), VectorField.zeros(G))
            assert lebesgue_norm(total - snap.R1, 1) <= 1e-8


def test_velocity_shared_by_members(stage):
    y = stage.prev.ensemble[0].path.at(0.6)
    a = stage.prev.ensemble[0]
    single = Stage(StageTriple(G, stage.prev.u, stage.prev.rho[:1], stage.prev.R[:1], (a,), True), PARAMS)
    assert np.array_equal(single.velocity(0.6, y).values, stage.velocity(0.6, y).values)


def test_zero_path_has_no_stochastic_terms(stage):
    snap = stage.snapshot(2, 0.6)
    for k in STO_TERMS:
        assert snap.terms[k].max_abs() == 0.0
    assert stage.snapshot(0, 0.6).terms["sto2"].max_abs() > 0


def test_zero_defect_and_density_give_zero_defect(ensemble, triple0):
    zero_v = TimeField.constant(VectorField.zeros(G))
    zero_s = TimeField.constant(ScalarField.zeros(G))
    tr = StageTriple(G, triple0.u, (zero_s,) * 3, (zero_v,) * 3, ensemble, True)
    snap = Stage(tr, PARAMS).snapshot(0, 0.7)
    assert snap.R1.max_abs() == 0.0 and snap.rho1.max_abs() == 0.0


def test_zero_defect_leaves_density(ensemble, triple0):
    # the velocity perturbation carries no R-dependence, so only the transport of rho_eps survives
    zero = TimeField.constant(VectorField.zeros(G))
    tr = StageTriple(G, triple0.u, triple0.rho, (zero,) * 3, ensemble, True)
    snap = Stage(tr, PARAMS).snapshot(0, 0.7)
    assert snap.vartheta.max_abs() == 0.0 and snap.q.max_abs() == 0.0
    assert np.array_equal(snap.rho1.values, snap.rho_eps.values)
    expected = -((snap.w_shifted + snap.wc_shifted) * snap.rho_eps)
    assert np.max(np.abs(snap.R1.values - expected.values)) <= 1e-12 * expected.max_abs()


G256 = GridSpec(2, 256, 512)


@pytest.fixture(scope="module")
def resolved_stage():
    ens = make_ensemble([11, 12], G256, L=L_CAL, kappa=E.kappa)
    return Stage(initial_stage(2.0, G256, ens), PARAMS)


def test_velocity_divergence_free(resolved_stage):
    for t in (0.5, 0.8):
        assert divergence(resolved_stage.velocity(t)).max_abs() <= 1e-10
        y = resolved_stage.prev.ensemble[1].path.at(t)
        assert divergence(resolved_stage.velocity(t, y)).max_abs() <= 1e-10


def test_strong_residual(resolved_stage):
    for t in (0.45, 0.7):
        res = strong_residual(resolved_stage, 0, t)
        assert res["residual"] <= 1e-8 * res["scale"]


def test_stage_weak_residual(stage):
    tr = stage.next_triple()
    bank = TestFunctionBank(G)
    t = G.times[185]
    gauss = triple_residual(tr, 0, bank, t, "gauss", 5).max()
    assert gauss <= 1e-8


def test_adaptedness(triple0, stage):
    t = G.times[300]
    smp = triple0.ensemble[0]
    other_path = smp.path.with_tail_replaced(t, 999)
    other = Sample(smp.seed, other_path, stopping_time(other_path, L_CAL, E.kappa))
    tr = StageTriple(G, triple0.u, triple0.rho[:1], triple0.R[:1], (other,), True)
    a, b = Stage(tr, PARAMS).snapshot(0, t), stage.snapshot(0, t)
    assert np.array_equal(a.rho1.values, b.rho1.values)
    assert np.max(np.abs(a.R1.values - b.R1.values)) == 0.0


def test_diffusion_term():
    ens = make_ensemble([11], G256, L=L_CAL, kappa=E.kappa)
    tr = initial_stage(2.0, G256, ens, diffusion=True)
    st_ = Stage(tr, PARAMS)
    snap = st_.snapshot(0, 0.6)
    assert "diff" in snap.terms and snap.terms["diff"].max_abs() > 0
    res = strong_residual(st_, 0, 0.6)
    assert res["residual"] <= 1e-8 * res["scale"]
    zero = TimeField.constant(VectorField.zeros(G256))
    flat = Stage(StageTriple(G256, tr.u, tr.rho, (zero,), ens, True, diffusion=True), PARAMS)
    assert flat.snapshot(0, 0.6).terms["diff"].max_abs() == 0.0


def test_diffusion_initial_residual():
    ens = make_ensemble([11], G, L=L_CAL, kappa=E.kappa)
    tr = initial_stage(2.0, G, ens, diffusion=True)
    assert triple_residual(tr, 0, TestFunctionBank(G), G.times[255], "gauss").max() <= 1e-8


def test_diffusion_bound_ratio_flat():
    # the bound is stated for nu >> lam * mu and sigma >> nu, where grad(q) is negligible
    grid = GridSpec(2, 512, 512)
    ens = make_ensemble([11], grid, L=L_CAL, kappa=E.kappa)
    tr = initial_stage(2.0, grid, ens, diffusion=True)
    ratios = []
    for mu, nu in ((1, 16), (1, 32), (2, 32)):
        st_ = Stage(tr, replace(PARAMS, mu=mu, nu=nu, sigma=256.0))
        val = lebesgue_norm(st_.snapshot(0, 0.6).terms["diff"], 1)
        ratios.append(val * mu ** (2 / E.s_prime) / nu)
    assert max(ratios) / min(ratios) < 2


def test_run_stage_report_and_window(resolved_stage):
    cfg = StageConfig(time_stride=64, members=2)
    _, rep, _ = run_stage(resolved_stage.prev, 0.3, cfg, params=replace(PARAMS, eps=None))
    assert rep.window["holds"]
    assert rep.div_u <= 1e-10 and rep.u_member_spread <= 1e-14
    assert set(rep.breakdown["norms"]) == set(DEFECT_TERMS)
    for m in rep.window["members"].values():
        assert m["cut"] >= 1 / 3 - 0.3 - 1e-12
    assert rep.to_json()["contract"]["defect"]["bound"] == 0.3


def test_faithful_search_is_infeasible(triple0):
    with pytest.raises(StageInfeasible) as exc:
        run_stage(triple0, 0.3, StageConfig(time_stride=64))
    assert exc.value.trials and exc.value.trials[0]["needs_n"] > 1e9


def test_iteration_zero_stages(triple0):
    res = run_iteration(triple0, [], 0)
    assert res.triples == [triple0] and res.reports == []
    assert res.convergence["final_norm_ok"]
    assert defect_norm(triple0, 16) > 0
