import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from uhmc import bounds as B
from uhmc.integrate import IntegratorParams
from uhmc.model import MeanFieldPotential, TargetMoments, make_cosine_interaction, make_double_well_tail_convex, \
    make_gaussian, mf_assemble
from uhmc.variational import phi_same_endpoint

# Values frozen from the extended-precision oracles in tests/oracles.py.
REG_D1_LH1 = 4.390783144983992
BIAS_C_D2 = 12.624791743627872
MIXING_EXAMPLE = 553.3146611555003
MF_C_POINT = 162.40230103166002


def test_regularization_constant_values():
    assert B.regularization_constant(0.35, 1, 0.0) == pytest.approx(3 / 0.7, rel=1e-15)
    assert B.regularization_constant(0.35, 5, 0.0) == B.regularization_constant(0.35, 1, 0.0)
    assert B.regularization_constant(0.35, 1, 1.0) == pytest.approx(REG_D1_LH1, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 2), st.integers(1, 100), st.floats(0, 5))
def test_regularization_constant_monotone(T, d, LH):
    base = B.regularization_constant(T, d, LH)
    assert B.regularization_constant(T, d + 1, LH) >= base
    assert B.regularization_constant(T, d, LH + 0.1) >= base


def test_mixing_time_bound_cases():
    cert = B.logconcave_rates(1.0, 1.0, 0.0, 0.35, 0.35 / 8)
    assert cert.c == pytest.approx(0.01225, rel=1e-14) and cert.M1 == 1.0
    assert B.mixing_time_bound(0.01, cert, 2.0, 0.35, 1, 0.0) == pytest.approx(MIXING_EXAMPLE, rel=1e-12)
    # argument of the logarithm equals one
    pref = B.regularization_constant(0.35, 1, 0.0)
    assert B.mixing_time_bound(0.01, cert, 0.01 / pref, 0.35, 1, 0.0) == pytest.approx(2.0)
    assert B.mixing_time_bound(0.01, cert, 2.0, 0.35, 64, 0.0) == B.mixing_time_bound(0.01, cert, 2.0, 0.35, 1, 0.0)
    with pytest.raises(ValueError):
        B.mixing_time_bound(0.0, cert, 2.0, 0.35, 1, 0.0)


def test_tv_contraction_bound_decays():
    cert = B.logconcave_rates(1.0, 1.0, 0.0, 0.35, 0.35 / 8)
    vals = [B.tv_contraction_bound(m, cert, 1.0, 4.0) for m in (0, 10, 20)]
    assert vals[0] == 4.0 and vals[1] == pytest.approx(4.0 * math.exp(-10 * cert.c))
    assert vals[2] < vals[1]


def test_bias_constant_special_cases():
    L, d, T = 1.3, 7, 0.3
    assert B.bias_constant_C(d, T, L, 0.0, 0.0, TargetMoments(0.0, 0.0)) == pytest.approx(4 * L * math.sqrt(d))
    m2 = 2.5
    expected = math.sqrt(16 * L * L * d + L * L * m2 / T**2)
    assert B.bias_constant_C(d, T, L, 0.0, 0.0, TargetMoments(m2, m2 * m2)) == pytest.approx(expected)
    assert B.bias_constant_C(2, 0.35, 1, 1, 1, TargetMoments(2, 8)) == pytest.approx(BIAS_C_D2, rel=1e-12)


def test_tv_bias_bound_scaling():
    args = dict(T=0.35, d=3, L_H=0.2, M2=1.5, C=4.0)
    assert B.tv_bias_bound(0.0, **args) == 0
    assert B.tv_bias_bound(0.02, **args) == pytest.approx(4 * B.tv_bias_bound(0.01, **args))
    by_hand = 0.01**2 * (1.5 * math.sqrt(0.35**-2 + 27 * 3 * 0.04 * 0.35**4) * 1.5 + 4.0)
    assert B.tv_bias_bound(0.01, **args) == pytest.approx(by_hand, rel=1e-14)


def test_logconcave_rates_nonconvex_branch():
    cert = B.logconcave_rates(1.0, 1.0, 1.0, 0.35, 0.35 / 8)
    assert cert.M1 == pytest.approx(math.exp(2.5 * (1 + 4 / 0.35 * math.sqrt(2))), rel=1e-13)
    assert cert.c == pytest.approx(0.1225 / 156 * math.exp(-10 / 0.35 * math.sqrt(2)), rel=1e-13)
    assert cert.source == "nonconvex_BEZ" and not cert.valid
    with pytest.raises(ValueError):
        B.logconcave_rates(2.0, 1.0, 0.0, 0.3, 0.03)


def test_mean_field_prefactor_reductions():
    T = 0.3
    assert B.mean_field_regularization_constant(T, 1, 0.7) == pytest.approx(1.5 * math.sqrt(T**-2 + 34 * 0.49 * T**4))
    assert B.mean_field_regularization_constant(T, 4, 0.0) == pytest.approx(1.5 / T)


def test_mean_field_constant_point():
    got = B.mean_field_constant_C(3, 2, 0.3, 1.3 + 0.4, 0.3 + 0.8, 0.3 + 1.4, 4.0, 20.0)
    assert got == pytest.approx(MF_C_POINT, rel=1e-12)


def _mf(eps):
    return MeanFieldPotential(3, 2, make_double_well_tail_convex(2, 0.3), make_cosine_interaction(2), eps)


def test_mean_field_bundle():
    mfp = _mf(0.1)
    moments = TargetMoments(6.0, 50.0, (2.0,) * 3, (10.0,) * 3)
    cert = B.mean_field_rates(0.7, 1.3, 0.0, 0.29, 0.29 / 8, 0.1, 1.0, 3)
    reports = {r.name: r for r in B.mean_field_bounds(mfp, 0.29, 0.29 / 8, moments, cert, 1.0, 0.05, 2.0)}
    assert set(reports) == {"mf_regularization_constant", "mf_bias_constant_C", "mf_mixing_time_bound", "mf_tv_bias_bound"}
    assert reports["mf_regularization_constant"].value == pytest.approx(O.mean_field_prefactor(0.29, 2, 0.3, 0.1, 1.0))
    assert reports["mf_bias_constant_C"].value == pytest.approx(
        O.mean_field_C(3, 2, 0.29, 1.3, 0.3, 0.3, 0.1, 1.0, 1.0, 1.0, 6.0, 30.0), rel=1e-12)
    pref = reports["mf_regularization_constant"].value
    bias = 0.29**2 / 64 * (pref * 2.0 + reports["mf_bias_constant_C"].value)
    assert reports["mf_tv_bias_bound"].value == pytest.approx(bias, rel=1e-13)


def test_mean_field_without_interaction_matches_general_prefactor_per_particle():
    mfp = _mf(0.0)
    U = mf_assemble(mfp)
    V = mfp.V
    general = {r.name: r.value for r in B.general_bounds(V, 0.29, 0.29 / 8)}
    mf = {r.name: r.value for r in B.mean_field_bounds(mfp, 0.29, 0.29 / 8, TargetMoments(1.0, 2.0))}
    assert U.L == V.L and U.L_H == V.L_H
    # with L_H = 0 both prefactors coincide
    flat = MeanFieldPotential(2, 1, make_gaussian(1), make_gaussian(1), 0.0)
    g = B.general_bounds(mf_assemble(flat), 0.35, 0.35 / 8)[0].value
    m = B.mean_field_bounds(flat, 0.35, 0.35 / 8, TargetMoments(2.0, 8.0))[0].value
    assert g == pytest.approx(m, rel=1e-15)
    assert mf["mf_regularization_constant"] >= general["regularization_constant"] * (1 - 1e-15)


def test_reports_json_deterministic():
    U = make_gaussian(1)
    cert = B.logconcave_rates(1, 1, 0, 0.35, 0.35 / 8)
    make = lambda: B.reports_to_json(B.general_bounds(U, 0.35, 0.35 / 8, TargetMoments(1, 3), cert, 2.0, 0.01, 1.0))
    text = make()
    assert text == make()
    names = [r["name"] for r in json.loads(text)]
    assert names == ["regularization_constant", "bias_constant_C", "rate_certificate", "mixing_time_bound", "tv_bias_bound"]


def test_overlap_estimator_cases():
    eye = lambda v: np.broadcast_to(np.eye(v.shape[-1]), v.shape + (v.shape[-1],))
    assert B.overlap_bound_mc(lambda v: (v, eye(v)), 2000, dim=1)[0] == 0
    est, se = B.overlap_bound_mc(lambda v: (v + 0.3, eye(v)), 2000, dim=1)
    assert est == pytest.approx(0.3, abs=1e-15) and se < 1e-15
    with pytest.raises(ValueError):
        B.overlap_bound_mc(lambda v: (v, eye(v)), 10, dim=1)


def test_overlap_estimator_below_regularization_bound():
    U, p = make_gaussian(1), IntegratorParams(0.35, 8)
    x, y = np.array([0.5]), np.array([0.0])

    def phi(v):
        r = phi_same_endpoint(np.broadcast_to(x, v.shape), np.broadcast_to(y, v.shape), v, p, U)
        return r.u, r.jac

    est, se = B.overlap_bound_mc(phi, 4000, dim=1)
    assert est + 3 * se <= B.regularization_constant(0.35, 1, 0.0) * 0.5 * (2 / 3)
