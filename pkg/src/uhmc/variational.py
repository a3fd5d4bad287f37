"""Discrete action, the two-point Verlet boundary-value problem and the velocity maps.

``phi_same_endpoint`` returns the velocity u with q~_T(y, u) = q~_T(x, v);
``phi_exact_endpoint`` returns u with q_T(x, u) = q~_T(x, v). Both also return
the Jacobian with respect to v and its log-determinant. All routines accept
leading batch axes and only update batch members that have not converged, so
results do not depend on how replicas are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrate import (
    IntegratorParams,
    default_exact_mode,
    endpoint_and_jacobian,
    exact_endpoint_and_jacobian,
)
from .model import Potential

RESIDUAL_TOL = 1e-10
REPLAY_TOL = 1e-9
MAX_ITERS = 100


class ConvergenceError(RuntimeError):
    def __init__(self, what: str, residual: float):
        super().__init__(f"{what} did not converge (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class DiscretePath:
    params: IntegratorParams
    points: np.ndarray  # (..., N+1, d); first and last rows are the fixed endpoints

    @property
    def start(self):
        return self.points[..., 0, :]

    @property
    def end(self):
        return self.points[..., -1, :]


@dataclass(frozen=True)
class PhiResult:
    u: np.ndarray
    path: Optional[DiscretePath]
    jac: np.ndarray
    logdet: np.ndarray
    newton_iters: int
    residual: float


def discrete_lagrangian(x, y, h: float, U: Potential):
    dx = np.asarray(y) - np.asarray(x)
    return 0.5 * h * (np.sum(dx * dx, axis=-1) / h**2 - U.energy(y) - U.energy(x))


def action_sum(path: DiscretePath, U: Potential):
    q = path.points
    return np.sum(discrete_lagrangian(q[..., :-1, :], q[..., 1:, :], path.params.h, U), axis=-1)


def euler_lagrange_residual(points, h: float, U: Potential):
    """Gradient of the action sum with respect to the interior points."""
    q = points
    mid = q[..., 1:-1, :]
    return (2 * mid - q[..., :-2, :] - q[..., 2:, :]) / h - h * U.gradient(mid)


def _block_thomas(diag, off: float, rhs):
    """Solve a block tridiagonal system with constant scalar off-diagonal ``off * I``.

    ``diag`` has shape (..., m, d, d), ``rhs`` shape (..., m, d).
    """
    m = diag.shape[-3]
    d = diag.shape[-1]
    eye = np.eye(d)
    G = np.empty_like(diag)
    y = np.empty_like(rhs)
    S = diag[..., 0, :, :]
    G[..., 0, :, :] = np.linalg.solve(S, off * np.broadcast_to(eye, S.shape))
    y[..., 0, :] = np.linalg.solve(S, rhs[..., 0, :, None])[..., 0]
    for k in range(1, m):
        S = diag[..., k, :, :] - off * G[..., k - 1, :, :]
        G[..., k, :, :] = np.linalg.solve(S, off * np.broadcast_to(eye, S.shape))
        y[..., k, :] = np.linalg.solve(S, (rhs[..., k, :] - off * y[..., k - 1, :])[..., None])[..., 0]
    x = np.empty_like(rhs)
    x[..., m - 1, :] = y[..., m - 1, :]
    for k in range(m - 2, -1, -1):
        x[..., k, :] = y[..., k, :] - np.einsum("...ij,...j->...i", G[..., k, :, :], x[..., k + 1, :])
    return x


def _sup(r):
    return np.max(np.abs(r), axis=(-2, -1)) if r.size else np.zeros(r.shape[:-2])


def solve_discrete_bvp(a, b, p: IntegratorParams, U: Potential, tol: float = RESIDUAL_TOL,
                       max_iters: int = MAX_ITERS, initial: Optional[np.ndarray] = None) -> DiscretePath:
    """Minimise the discrete action over paths from ``a`` to ``b``.

    Newton's method on the interior Euler-Lagrange residual, with step halving
    when the residual grows and a backtracking gradient step as last resort.
    """
    return _solve_bvp(a, b, p, U, tol, max_iters, initial)[0]


def _solve_bvp(a, b, p, U, tol=RESIDUAL_TOL, max_iters=MAX_ITERS, initial=None):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    N, h = p.N, p.h
    frac = (np.arange(N + 1) / N)[:, None]
    if initial is None:
        q = a[..., None, :] + frac * (b - a)[..., None, :]
    else:
        q = np.array(initial, dtype=float)
    q[..., 0, :], q[..., -1, :] = a, b
    if N == 1:
        return DiscretePath(p, q), 0, 0.0
    batch = q.shape[:-2]
    d = q.shape[-1]
    flat = q.reshape((-1,) + q.shape[-2:])
    scale = 1.0 + np.max(np.abs(np.concatenate([a.reshape(-1, d), b.reshape(-1, d)], axis=-1)), axis=-1)
    scale = np.broadcast_to(scale, (flat.shape[0],))
    r = euler_lagrange_residual(flat, h, U)
    err = _sup(r)
    active = err > tol * scale
    it = 0
    eye = np.eye(d)
    while np.any(active):
        if it >= max_iters:
            raise ConvergenceError("discrete BVP", float(err.max()))
        it += 1
        idx = np.flatnonzero(active)
        qa, ra = flat[idx], r[idx]
        H = U.hessian(qa[:, 1:-1, :])
        diag = (2.0 / h) * eye - h * H
        step = _block_thomas(diag, -1.0 / h, -ra)
        new_q, new_r, new_err = _damped_update(qa, step, ra, err[idx], h, U)
        flat[idx], r[idx], err[idx] = new_q, new_r, new_err
        active[idx] = new_err > tol * scale[idx]
    path = DiscretePath(p, flat.reshape(batch + q.shape[-2:]))
    return path, it, float(err.max()) if err.size else 0.0


def _damped_update(q, step, r, err, h, U):
    t = np.ones(q.shape[0])
    out_q, out_r, out_err = q.copy(), r.copy(), err.copy()
    pending = np.ones(q.shape[0], dtype=bool)
    for _ in range(30):
        cand = q.copy()
        cand[:, 1:-1, :] += t[:, None, None] * step
        cr = euler_lagrange_residual(cand, h, U)
        ce = _sup(cr)
        ok = pending & (ce < err) | pending & (t == 1.0) & (ce <= err * 1.0000001)
        out_q[ok], out_r[ok], out_err[ok] = cand[ok], cr[ok], ce[ok]
        pending &= ~ok
        if not pending.any():
            return out_q, out_r, out_err
        t = np.where(pending, 0.5 * t, t)
    # Newton stalled: fall back to a gradient step on the action
    for i in np.flatnonzero(pending):
        out_q[i], out_r[i], out_err[i] = _gradient_fallback(q[i], r[i], err[i], h, U)
    return out_q, out_r, out_err


def _gradient_fallback(q, r, err, h, U):
    p = IntegratorParams(h * (q.shape[0] - 1), q.shape[0] - 1)
    s0 = action_sum(DiscretePath(p, q), U)
    t = h
    for _ in range(60):
        cand = q.copy()
        cand[1:-1] -= t * r
        s1 = action_sum(DiscretePath(p, cand), U)
        if s1 <= s0 - 0.5 * t * np.sum(r * r):
            cr = euler_lagrange_residual(cand, h, U)
            return cand, cr, _sup(cr)
        t *= 0.5
    return q, r, err


def velocity_from_path(path: DiscretePath, U: Potential):
    """Initial velocity of the Verlet trajectory through the path points."""
    q = path.points
    h = path.params.h
    return (q[..., 1, :] - q[..., 0, :]) / h + 0.5 * h * U.gradient(q[..., 0, :])


def _logabsdet(J):
    return np.linalg.slogdet(J)[1]


def phi_same_endpoint(x, y, v, p: IntegratorParams, U: Potential) -> PhiResult:
    """Velocity u with q~_T(y, u) = q~_T(x, v), via the discrete action minimiser."""
    x, y, v = np.broadcast_arrays(*(np.asarray(a, float) for a in (x, y, v)))
    target, J_x, _ = endpoint_and_jacobian(x, v, p, U)
    path, iters, el_residual = _solve_bvp(y, target, p, U)
    u = velocity_from_path(path, U)
    _, J_y, _ = endpoint_and_jacobian(y, u, p, U)
    jac = np.linalg.solve(J_y, J_x)
    logdet = _logabsdet(J_x) - _logabsdet(J_y)
    return PhiResult(u, path, jac, logdet, iters, el_residual)


def shoot(endpoint_fn, x, target, u0, tol: float, max_iters: int = MAX_ITERS):
    """Newton's method in the velocity for endpoint_fn(x, u) == target.

    ``endpoint_fn`` returns the endpoint and its velocity Jacobian. A step is
    halved while it increases the endpoint error.
    """
    x, target = np.broadcast_arrays(np.asarray(x, float), np.asarray(target, float))
    batch, d = x.shape[:-1], x.shape[-1]
    xf, bf = x.reshape(-1, d), target.reshape(-1, d)
    u = np.array(np.broadcast_to(u0, x.shape), dtype=float).reshape(-1, d)
    q, J = endpoint_fn(xf, u)
    J = np.array(J)
    F = q - bf
    err = np.max(np.abs(F), axis=-1)
    scale = 1.0 + np.max(np.abs(bf), axis=-1)
    active = err > tol * scale
    it = 0
    while np.any(active):
        if it >= max_iters:
            raise ConvergenceError("shooting", float(err.max()))
        it += 1
        idx = np.flatnonzero(active)
        step = np.linalg.solve(J[idx], F[idx][..., None])[..., 0]
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(30):
            cand = u[idx] - t[:, None] * step
            cq, cJ = endpoint_fn(xf[idx], cand)
            cF = cq - bf[idx]
            ce = np.max(np.abs(cF), axis=-1)
            ok = pending & ((ce < err[idx]) | (t == 1.0) & (ce <= tol * scale[idx]))
            sel = idx[ok]
            u[sel], J[sel], F[sel], err[sel] = cand[ok], cJ[ok], cF[ok], ce[ok]
            pending &= ~ok
            if not pending.any():
                break
            t = np.where(pending, 0.5 * t, t)
        if pending.any():
            raise ConvergenceError("shooting (line search)", float(err[idx[pending]].max()))
        active[idx] = err[idx] > tol * scale[idx]
    return u.reshape(batch + (d,)), J.reshape(batch + (d, d)), it, float(err.max()) if err.size else 0.0


def phi_exact_endpoint(x, v, p: IntegratorParams, U: Potential, mode: Optional[str] = None,
                       refinement: int = 64) -> PhiResult:
    """Velocity u with q_T(x, u) = q~_T(x, v) for the exact Hamiltonian flow."""
    mode = mode or default_exact_mode(U)
    x, v = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float))
    target, J_verlet, _ = endpoint_and_jacobian(x, v, p, U)

    def exact(xx, uu):
        return exact_endpoint_and_jacobian(xx, uu, p, U, mode, refinement)

    tol = 1e-12 if mode == "analytic_gaussian" else 1e-11
    u, J_exact, iters, res = shoot(exact, x, target, v, tol)
    jac = np.linalg.solve(J_exact, J_verlet)
    logdet = _logabsdet(J_verlet) - _logabsdet(J_exact)
    return PhiResult(u, None, jac, logdet, iters, res)


def phi_exact_endpoint_inverse(x, w, p: IntegratorParams, U: Potential, mode: Optional[str] = None,
                               refinement: int = 64) -> PhiResult:
    """Inverse map: velocity v with q~_T(x, v) = q_T(x, w)."""
    mode = mode or default_exact_mode(U)
    x, w = np.broadcast_arrays(np.asarray(x, float), np.asarray(w, float))
    target, J_exact = exact_endpoint_and_jacobian(x, w, p, U, mode, refinement)

    def verlet(xx, uu):
        q, J, _ = endpoint_and_jacobian(xx, uu, p, U)
        return q, J

    v, J_verlet, iters, res = shoot(verlet, x, target, w, 1e-12)
    jac = np.linalg.solve(J_verlet, J_exact)
    logdet = _logabsdet(J_exact) - _logabsdet(J_verlet)
    return PhiResult(v, None, jac, logdet, iters, res)
