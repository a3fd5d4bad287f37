"""Velocity Verlet, its continuous interpolation, exact flows and velocity derivatives.

Arrays carry optional leading batch axes; trajectories stack grid values along
axis ``-2`` so that ``positions[..., k, :]`` is the state at ``t_k = k h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Potential

STEP_CONSTRAINT = 1.0 / 6.0


class IntegratorBlowUp(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state after Verlet step {step}")
        self.step = step


@dataclass(frozen=True)
class IntegratorParams:
    """Duration ``T`` split into ``N`` Verlet steps of size ``h = T / N``."""

    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError("T must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")

    @property
    def h(self) -> float:
        return self.T / self.N

    def constraint_value(self, L: float) -> float:
        return L * (self.T**2 + self.T * self.h)

    def constraint_ok(self, L: float) -> bool:
        return self.constraint_value(L) <= STEP_CONSTRAINT * (1 + 1e-12)

    def refined(self, factor: int) -> "IntegratorParams":
        return IntegratorParams(self.T, self.N * int(factor))


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray
    v: np.ndarray
    grad: Optional[np.ndarray] = None  # cached gradient at x


@dataclass(frozen=True)
class Trajectory:
    params: IntegratorParams
    positions: np.ndarray  # (..., N+1, d)
    velocities: np.ndarray
    gradients: np.ndarray

    @property
    def grad_evals(self) -> int:
        return self.params.N + 1

    @property
    def endpoint(self) -> PhaseState:
        return PhaseState(self.positions[..., -1, :], self.velocities[..., -1, :], self.gradients[..., -1, :])


@dataclass(frozen=True)
class DerivativeFlow:
    """Derivatives of the Verlet endpoint with respect to the initial velocity."""

    d2q: np.ndarray  # (..., d, d)
    d2v: np.ndarray
    per_grid: Optional[tuple] = None  # (Q, P, HQ) stacked over grid points on axis -3


def verlet_step(s: PhaseState, h: float, U: Potential) -> PhaseState:
    g = U.gradient(s.x) if s.grad is None else s.grad
    x = s.x + h * s.v - 0.5 * h * h * g
    g_new = U.gradient(x)
    v = s.v - 0.5 * h * (g + g_new)
    return PhaseState(x, v, g_new)


def verlet_flow(s: PhaseState, p: IntegratorParams, U: Potential) -> Trajectory:
    x = np.asarray(s.x, dtype=float)
    v = np.asarray(s.v, dtype=float)
    shape = np.broadcast_shapes(x.shape, v.shape)
    x, v = np.broadcast_to(x, shape), np.broadcast_to(v, shape)
    pos = np.empty(shape[:-1] + (p.N + 1, shape[-1]))
    vel, grd = np.empty_like(pos), np.empty_like(pos)
    state = PhaseState(x, v, U.gradient(x) if s.grad is None else s.grad)
    pos[..., 0, :], vel[..., 0, :], grd[..., 0, :] = state.x, state.v, state.grad
    h = p.h
    for k in range(1, p.N + 1):
        state = verlet_step(state, h, U)
        if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.v))):
            raise IntegratorBlowUp(k)
        pos[..., k, :], vel[..., k, :], grd[..., k, :] = state.x, state.v, state.grad
    return Trajectory(p, pos, vel, grd)


def _cell(params: IntegratorParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12 * params.T) or np.any(t > params.T * (1 + 1e-12)):
        raise ValueError("t outside [0, T]")
    k = np.clip(np.floor(t / params.h + 1e-9).astype(int), 0, params.N - 1)
    tau = t - k * params.h
    # land exactly on knots so interpolation reproduces grid values
    on_knot = np.isclose(tau, params.h, rtol=0, atol=1e-12 * params.T)
    return k, tau, on_knot


def interpolate_many(traj: Trajectory, times) -> PhaseState:
    """Interpolated states at ``times``; result has a time axis at position -2."""
    times = np.atleast_1d(times)
    k, tau, on_knot = _cell(traj.params, times)
    q, v, g = traj.positions, traj.velocities, traj.gradients
    qk, vk, gk, gk1 = q[..., k, :], v[..., k, :], g[..., k, :], g[..., k + 1, :]
    tau_ = tau[:, None]
    x = qk + tau_ * vk - 0.5 * tau_**2 * gk
    vel = vk - 0.5 * tau_ * (gk + gk1)
    knots = np.rint(times / traj.params.h).astype(int)
    exact = np.isclose(times, knots * traj.params.h, rtol=0, atol=1e-12 * traj.params.T) | on_knot
    if np.any(exact):
        x[..., exact, :] = q[..., knots[exact], :]
        vel[..., exact, :] = v[..., knots[exact], :]
    return PhaseState(x, vel)


def interpolate(traj: Trajectory, t: float) -> PhaseState:
    s = interpolate_many(traj, [t])
    return PhaseState(s.x[..., 0, :], s.v[..., 0, :])


def dense_times(params: IntegratorParams, per_cell: int = 16) -> np.ndarray:
    return np.linspace(0.0, params.T, params.N * per_cell + 1)


def _modes(U: Potential):
    if U.quadratic is None:
        raise ValueError("analytic flow needs a quadratic potential")
    A = np.asarray(U.quadratic, dtype=float)
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        return np.diag(A).copy(), None
    lam, Q = np.linalg.eigh(A)
    return np.clip(lam, 0.0, None), Q


def _rotation(omega2, t):
    w = np.sqrt(omega2)
    c = np.cos(w * t)
    s_over_w = np.where(w > 0, np.sin(w * t) / np.where(w > 0, w, 1.0), t)
    w_s = w * np.sin(w * t)
    return c, s_over_w, w_s


def analytic_flow(s: PhaseState, t, U: Potential) -> PhaseState:
    """Closed-form Hamiltonian flow for a quadratic potential at time(s) ``t``.

    For an array of times the result carries a time axis at position -2.
    """
    omega2, Q = _modes(U)
    x, v = np.asarray(s.x, float), np.asarray(s.v, float)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, float))[:, None]
    if Q is not None:
        x, v = x @ Q, v @ Q
    x, v = x[..., None, :], v[..., None, :]
    c, sw, ws = _rotation(omega2, t)
    qt = c * x + sw * v
    vt = -ws * x + c * v
    if Q is not None:
        qt, vt = qt @ Q.T, vt @ Q.T
    if scalar:
        qt, vt = qt[..., 0, :], vt[..., 0, :]
    return PhaseState(qt, vt)


def analytic_velocity_derivative(t: float, U: Potential) -> np.ndarray:
    """D_2 q_t for a quadratic potential (independent of the state)."""
    omega2, Q = _modes(U)
    _, sw, _ = _rotation(omega2, t)
    return np.diag(sw) if Q is None else (Q * sw) @ Q.T


def exact_flow(
    s: PhaseState,
    T: float,
    U: Potential,
    mode: str = "analytic_gaussian",
    h: Optional[float] = None,
    refinement: int = 64,
) -> PhaseState:
    """Exact Hamiltonian flow: closed form, or Verlet at step ``h / refinement``."""
    if mode == "analytic_gaussian":
        return analytic_flow(s, T, U)
    if mode == "reference_fine_step":
        if h is None:
            raise ValueError("reference mode needs the coarse step h")
        n = int(round(T / h)) * int(refinement)
        return verlet_flow(s, IntegratorParams(T, n), U).endpoint
    raise ValueError(f"unknown mode {mode!r}")


def default_exact_mode(U: Potential) -> str:
    return "analytic_gaussian" if U.quadratic is not None else "reference_fine_step"


def derivative_flow(
    s: PhaseState,
    p: IntegratorParams,
    U: Potential,
    traj: Optional[Trajectory] = None,
    keep_grid: bool = False,
) -> DerivativeFlow:
    """Integrate the linearised Verlet recursion for d/dv of the trajectory.

    Q' = Q + h P - (h^2/2) H(q) Q,  P' = P - (h/2) [H(q) Q + H(q') Q'],
    started from Q = 0, P = I.
    """
    if traj is None:
        traj = verlet_flow(s, p, U)
    pos = traj.positions
    d = pos.shape[-1]
    batch = pos.shape[:-2]
    h = p.h
    Q = np.zeros(batch + (d, d))
    P = np.broadcast_to(np.eye(d), batch + (d, d)).copy()
    HQ = np.zeros_like(Q)
    grid = [(Q, P, HQ)] if keep_grid else None
    for k in range(p.N):
        Qn = Q + h * P - 0.5 * h * h * HQ
        HQn = U.hessian(pos[..., k + 1, :]) @ Qn
        P = P - 0.5 * h * (HQ + HQn)
        Q, HQ = Qn, HQn
        if not np.all(np.isfinite(P)):
            raise IntegratorBlowUp(k + 1)
        if keep_grid:
            grid.append((Q, P, HQ))
    per_grid = None
    if keep_grid:
        per_grid = tuple(np.stack(a, axis=-3) for a in zip(*grid))
    return DerivativeFlow(Q, P, per_grid)


def dense_derivatives(flow: DerivativeFlow, p: IntegratorParams, per_cell: int = 16):
    """Interpolated D_2 q~_s and D_2 v~_s on a dense time grid (time axis -3)."""
    if flow.per_grid is None:
        raise ValueError("derivative flow was computed without keep_grid")
    Qg, Pg, HQg = flow.per_grid
    times = dense_times(p, per_cell)
    k = np.minimum((np.arange(times.size) // per_cell), p.N - 1)
    tau = (times - k * p.h)[:, None, None]
    Qk, Pk, Hk, Hk1 = Qg[..., k, :, :], Pg[..., k, :, :], HQg[..., k, :, :], HQg[..., k + 1, :, :]
    dq = Qk + tau * Pk - 0.5 * tau**2 * Hk
    dv = Pk - 0.5 * tau * (Hk + Hk1)
    return times, dq, dv


def endpoint_and_jacobian(x, v, p: IntegratorParams, U: Potential):
    """Verlet endpoint q~_T(x, v) and D_2 q~_T(x, v)."""
    traj = verlet_flow(PhaseState(x, v), p, U)
    flow = derivative_flow(None, p, U, traj=traj)
    return traj.positions[..., -1, :], flow.d2q, traj


def exact_endpoint_and_jacobian(x, u, p: IntegratorParams, U: Potential, mode: str, refinement: int = 64):
    """Exact-flow endpoint q_T(x, u) and D_2 q_T(x, u)."""
    if mode == "analytic_gaussian":
        q = analytic_flow(PhaseState(x, u), p.T, U).x
        J = np.broadcast_to(analytic_velocity_derivative(p.T, U), np.shape(q) + (np.shape(q)[-1],))
        return q, J
    if mode == "reference_fine_step":
        q, J, _ = endpoint_and_jacobian(x, u, p.refined(refinement), U)
        return q, J
    raise ValueError(f"unknown mode {mode!r}")
