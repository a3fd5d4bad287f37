import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ar1_coefficients, endpoint_maps
from uhmc.bounds import apriori_derivative_position, strong_error_bound
from uhmc.integrate import (IntegratorParams, PhaseState, analytic_flow, dense_times, derivative_flow, exact_flow,
                            interpolate, interpolate_many, verlet_flow, verlet_step)
from uhmc.model import make_free, make_gaussian, shipped_potentials

GAUSS = make_gaussian(1, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        IntegratorParams(0.0, 4)
    with pytest.raises(ValueError):
        IntegratorParams(1.0, 0)
    p = IntegratorParams(0.35, 8)
    assert p.h == pytest.approx(0.04375)
    assert p.constraint_ok(1.0) and not IntegratorParams(0.55, 8).constraint_ok(1.0)


def test_verlet_step_values():
    s = verlet_step(PhaseState(np.array([1.0]), np.array([2.0])), 0.1, make_free(1))
    assert s.x[0] == pytest.approx(1.2) and s.v[0] == 2.0
    s = verlet_step(PhaseState(np.array([1.0]), np.array([0.0])), 0.1, GAUSS)
    assert s.x[0] == pytest.approx(0.995, abs=1e-15)
    assert s.v[0] == pytest.approx(-0.09975, abs=1e-15)


def test_verlet_time_reversible():
    s = verlet_step(PhaseState(np.array([1.0]), np.array([0.3])), 0.1, GAUSS)
    back = verlet_step(PhaseState(s.x, -s.v), 0.1, GAUSS)
    assert abs(back.x[0] - 1.0) < 1e-12 and abs(back.v[0] + 0.3) < 1e-12


def test_flow_free_and_harmonic():
    p = IntegratorParams(0.35, 8)
    x, v = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    assert np.allclose(verlet_flow(PhaseState(x, v), p, make_free(2)).endpoint.x, x + p.T * v, atol=1e-14)
    q = verlet_flow(PhaseState(np.array([1.0]), np.array([0.0])), p, GAUSS).endpoint.x[0]
    assert abs(q - math.cos(0.35)) <= strong_error_bound(p.h, p.T, 1.0, 0.0, 1.0, 0.0)


def test_flow_error_quarters_when_steps_double():
    s = PhaseState(np.array([1.0]), np.array([0.0]))
    errs = [abs(verlet_flow(s, IntegratorParams(0.35, n), GAUSS).endpoint.x[0] - math.cos(0.35)) for n in (8, 16)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_gradient_evaluation_count():
    calls = []
    U = make_gaussian(1)
    counted = type(U)(**{**U.__dict__, "gradient": lambda x: calls.append(1) or x})
    verlet_flow(PhaseState(np.array([1.0]), np.array([0.0])), IntegratorParams(0.35, 8), counted)
    assert len(calls) == 9


def test_interpolation_knots_and_free_flight():
    p = IntegratorParams(0.35, 8)
    x, v = np.array([1.0]), np.array([0.4])
    traj = verlet_flow(PhaseState(x, v), p, GAUSS)
    for k in range(p.N + 1):
        s = interpolate(traj, k * p.h)
        assert s.x[0] == traj.positions[k, 0] and s.v[0] == traj.velocities[k, 0]
    free = verlet_flow(PhaseState(x, v), p, make_free(1))
    s = interpolate_many(free, dense_times(p, 5))
    assert np.allclose(s.x[:, 0], x[0] + dense_times(p, 5) * v[0], atol=1e-14)


def test_interpolation_midpoint_value():
    traj = verlet_flow(PhaseState(np.array([1.0]), np.array([0.0])), IntegratorParams(0.1, 1), GAUSS)
    assert interpolate(traj, 0.05).x[0] == pytest.approx(0.99875, abs=1e-15)


def test_interpolation_rejects_outside_times():
    traj = verlet_flow(PhaseState(np.array([1.0]), np.array([0.0])), IntegratorParams(0.1, 1), GAUSS)
    with pytest.raises(ValueError):
        interpolate(traj, 0.2)


def test_analytic_flow():
    s = analytic_flow(PhaseState(np.array([1.0]), np.array([0.0])), math.pi / 2, GAUSS)
    assert np.allclose([s.x[0], s.v[0]], [0.0, -1.0], atol=1e-15)
    s0 = analytic_flow(PhaseState(np.array([0.7]), np.array([0.2])), 0.0, GAUSS)
    assert s0.x[0] == 0.7 and s0.v[0] == 0.2


def test_analytic_flow_rotated_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    U = type(GAUSS)(dim=2, energy=lambda x: 0.5 * np.einsum("...i,ij,...j", x, A, x),
                    gradient=lambda x: x @ A, hessian=lambda x: np.broadcast_to(A, np.shape(x) + (2,)),
                    L=float(np.linalg.eigvalsh(A).max()), quadratic=A)
    s = PhaseState(np.array([1.0, -0.5]), np.array([0.3, 0.2]))
    fine = verlet_flow(s, IntegratorParams(0.4, 4000), U).endpoint
    exact = analytic_flow(s, 0.4, U)
    assert np.allclose(exact.x, fine.x, atol=1e-7) and np.allclose(exact.v, fine.v, atol=1e-7)


def test_reference_mode_matches_analytic():
    s = PhaseState(np.array([1.0]), np.array([0.0]))
    a = exact_flow(s, 0.35, GAUSS, "analytic_gaussian")
    r = exact_flow(s, 0.35, GAUSS, "reference_fine_step", h=0.35 / 8, refinement=64)
    assert abs(a.x[0] - r.x[0]) < 1e-8


def test_derivative_flow_free_and_linear_oracle():
    p = IntegratorParams(0.35, 8)
    out = derivative_flow(PhaseState(np.zeros(2), np.ones(2)), p, make_free(2))
    assert np.allclose(out.d2q, p.T * np.eye(2)) and np.allclose(out.d2v, np.eye(2))
    out = derivative_flow(PhaseState(np.array([0.3]), np.array([1.0])), p, GAUSS)
    _, B = ar1_coefficients(1.0, p.T, p.N)
    assert abs(out.d2q[0, 0] - B) < 1e-12


@pytest.mark.parametrize("U", shipped_potentials(), ids=lambda U: f"{U.name}{U.dim}")
def test_derivative_flow_bound(U):
    T = math.floor(math.sqrt(1 / (6 * U.L * (1 + 1 / 8))) * 100) / 100
    p = IntegratorParams(T, 8)
    rng = np.random.default_rng(0)
    x, v = rng.normal(scale=2, size=(2, 1000, U.dim))
    J = derivative_flow(PhaseState(x, v), p, U).d2q
    op = np.sqrt(np.max(np.linalg.eigvalsh(np.swapaxes(J, -1, -2) @ J), axis=-1))
    assert np.all(op <= apriori_derivative_position(T) * (1 + 1e-9))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_derivative_flow_matches_finite_differences(values):
    U = shipped_potentials()[4]
    p = IntegratorParams(0.29, 8)
    x, v = np.array(values), np.linspace(-1, 1, 6)
    J = derivative_flow(PhaseState(x, v), p, U).d2q
    eps = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = eps
        col = (verlet_flow(PhaseState(x, v + e), p, U).endpoint.x - verlet_flow(PhaseState(x, v - e), p, U).endpoint.x)
        assert np.allclose(J[:, j], col / (2 * eps), atol=1e-7)


def test_batched_flow_matches_rows():
    p = IntegratorParams(0.3, 8)
    U = shipped_potentials()[3]
    x, v = np.random.default_rng(1).normal(size=(2, 5, 3))
    batch = verlet_flow(PhaseState(x, v), p, U).endpoint.x
    for i in range(5):
        assert np.array_equal(batch[i], verlet_flow(PhaseState(x[i], v[i]), p, U).endpoint.x)


def test_endpoint_map_oracle_consistent():
    Ax, Bv = endpoint_maps([[1.0]], 0.35, 8)
    A, B = ar1_coefficients(1.0, 0.35, 8)
    assert Ax[0, 0] == pytest.approx(A, abs=1e-15) and Bv[0, 0] == pytest.approx(B, abs=1e-15)
