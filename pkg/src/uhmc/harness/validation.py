"""Randomised checks of the trajectory, velocity-map and overlap inequalities.

Every check compares a computed quantity (``lhs``) with the closed-form
upper bound from :mod:`uhmc.bounds` (``rhs``) on random inputs. The bounds
are theorems under the step constraint, so a violation signals a bug;
checks that need the constraint are skipped when it fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .. import bounds as B
from ..integrate import (IntegratorParams, PhaseState, analytic_flow, analytic_velocity_derivative,
                         default_exact_mode, dense_derivatives, dense_times, derivative_flow,
                         interpolate_many, verlet_flow)
from ..kernel import ChainConfig, one_shot_step
from ..model import Potential
from ..rng import Streams
from ..variational import phi_exact_endpoint, phi_same_endpoint

REL_TOL = 1e-9
ABS_TOL = 1e-11
PER_CELL = 16
MAX_COUNTEREXAMPLES = 5


@dataclass
class LemmaTally:
    name: str
    checked: int = 0
    violations: int = 0
    skipped: bool = False
    reason: str = ""
    worst_ratio: float = 0.0
    counterexamples: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.skipped and self.violations == 0 and self.checked > 0

    def summary(self) -> dict:
        return {"lemma": self.name, "checked": self.checked, "violations": self.violations,
                "skipped": self.skipped, "reason": self.reason, "worst_ratio": self.worst_ratio}


GENERAL = ["apriori_position", "apriori_velocity", "apriori_difference",
           "derivative_position", "derivative_velocity", "derivative_difference",
           "trapezoid", "strong_error", "derivative_error",
           "same_endpoint_shift", "same_endpoint_jacobian", "same_endpoint_overlap",
           "exact_endpoint_shift", "exact_endpoint_jacobian"]
ONE_DIM = ["tv_ordering_same_endpoint", "tv_ordering_exact_endpoint"]
MEAN_FIELD = ["mf_apriori_position", "mf_apriori_velocity", "mf_apriori_difference",
              "mf_derivative_column", "mf_derivative_row", "mf_derivative_velocity",
              "mf_derivative_difference", "mf_strong_error", "mf_derivative_error",
              "mf_same_endpoint_shift", "mf_same_endpoint_jacobian", "mf_regularization_overlap",
              "mf_exact_endpoint_shift", "mf_exact_endpoint_jacobian"]
UNGATED = {"trapezoid"}


def _opnorm(a):
    # largest singular value; eigvalsh of a^T a is much faster than a batched SVD
    gram = np.swapaxes(a, -1, -2) @ a
    return np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[..., -1], 0.0))


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


class ValidationSuite:
    """Runs every applicable check on ``draws`` random inputs for one potential."""

    def __init__(self, U: Potential, params: IntegratorParams, draws: int = 10_000, seed: int = 0,
                 chunk: Optional[int] = None, refinement: int = 64, tv_draws: int = 100,
                 marginal_trials: int = 20_000):
        if refinement % PER_CELL:
            raise ValueError("refinement must be a multiple of the dense sampling rate")
        self.U, self.p, self.draws = U, params, int(draws)
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.refinement = refinement
        self.tv_draws = tv_draws
        self.marginal_trials = marginal_trials
        self.mode = default_exact_mode(U)
        self.h_ref = params.h / refinement
        if chunk is None:
            chunk = 2000 if self.mode == "analytic_gaussian" else max(50, 2_000_000 // (params.N * refinement * U.dim**2))
        self.chunk = chunk
        self.constraint_ok = params.constraint_ok(U.L)
        names = list(GENERAL)
        if U.dim == 1:
            names += ONE_DIM
        if U.mean_field is not None:
            names += MEAN_FIELD
        names.append("oneshot_marginal")
        self.tallies = {n: LemmaTally(n) for n in names}
        if not self.constraint_ok:
            for n, t in self.tallies.items():
                if n not in UNGATED:
                    t.skipped, t.reason = True, "step constraint violated"

    # -- bookkeeping ----------------------------------------------------------

    def _record(self, name, lhs, rhs, inputs: dict):
        t = self.tallies[name]
        if t.skipped:
            return
        lhs, rhs = np.broadcast_arrays(np.asarray(lhs, float), np.asarray(rhs, float))
        bad = ~(lhs <= rhs * (1 + REL_TOL) + ABS_TOL)
        t.checked += lhs.size
        t.violations += int(bad.sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > ABS_TOL, np.inf, 0.0))
        t.worst_ratio = max(t.worst_ratio, float(np.max(ratio)))
        for i in np.flatnonzero(bad)[: MAX_COUNTEREXAMPLES - len(t.counterexamples)]:
            case = {k: np.asarray(v)[i].tolist() for k, v in inputs.items()}
            t.counterexamples.append({**case, "lhs": float(lhs[i]), "rhs": float(rhs[i])})

    def _active(self, name) -> bool:
        return name in self.tallies and not self.tallies[name].skipped

    # -- inputs ---------------------------------------------------------------

    def _inputs(self, c):
        d, rng = self.U.dim, self.rng
        x = _log_uniform(rng, 0.02, 4.0, (c, 1)) * rng.standard_normal((c, d))
        v = _log_uniform(rng, 0.02, 4.0, (c, 1)) * rng.standard_normal((c, d))
        y = x + _log_uniform(rng, 1e-3, 2.0, (c, 1)) * rng.standard_normal((c, d))
        u = v + _log_uniform(rng, 1e-3, 2.0, (c, 1)) * rng.standard_normal((c, d))
        return x, v, y, u

    def _exact_dense(self, x, v):
        """Exact positions and velocity derivatives on the dense grid, plus the reference slack flag."""
        p = self.p
        times = dense_times(p, PER_CELL)
        if self.mode == "analytic_gaussian":
            q = analytic_flow(PhaseState(x, v), times, self.U).x
            dq = np.stack([analytic_velocity_derivative(t, self.U) for t in times])
            return q, np.broadcast_to(dq, x.shape[:-1] + dq.shape), False
        ref = p.refined(self.refinement)
        traj = verlet_flow(PhaseState(x, v), ref, self.U)
        flow = derivative_flow(None, ref, self.U, traj=traj, keep_grid=True)
        stride = self.refinement // PER_CELL
        return traj.positions[..., ::stride, :], flow.per_grid[0][..., ::stride, :, :], True

    # -- driver ---------------------------------------------------------------

    def run(self) -> list[LemmaTally]:
        done = 0
        while done < self.draws:
            c = min(self.chunk, self.draws - done)
            self._chunk(c)
            done += c
        self._trapezoid(self.draws)
        if self.U.dim == 1:
            self._tv_orderings()
        self._oneshot_marginal()
        return list(self.tallies.values())

    def _chunk(self, c):
        U, p = self.U, self.p
        x, v, y, u = self._inputs(c)
        inputs = {"x": x, "v": v, "y": y, "u": u}
        if not self.constraint_ok:
            return
        T, h, L, L_H, L_I = p.T, p.h, U.L, U.L_H, U.L_I
        times = dense_times(p, PER_CELL)
        t1, t2 = verlet_flow(PhaseState(x, v), p, U), verlet_flow(PhaseState(y, u), p, U)
        s1, s2 = interpolate_many(t1, times), interpolate_many(t2, times)
        f1 = derivative_flow(None, p, U, traj=t1, keep_grid=True)
        f2 = derivative_flow(None, p, U, traj=t2, keep_grid=True)
        _, dq1, dv1 = dense_derivatives(f1, p, PER_CELL)
        _, dq2, _ = dense_derivatives(f2, p, PER_CELL)

        nx, nv = np.linalg.norm(x, axis=-1), np.linalg.norm(v, axis=-1)
        nxT = np.linalg.norm(x + T * v, axis=-1)
        dx = np.linalg.norm(x - y, axis=-1)
        dxT = np.linalg.norm(x - y + T * (v - u), axis=-1)

        self._record("apriori_position", np.linalg.norm(s1.x, axis=-1).max(-1),
                     B.apriori_position(nx, nxT, L, T, h), inputs)
        self._record("apriori_velocity", np.linalg.norm(s1.v, axis=-1).max(-1),
                     B.apriori_velocity(nx, nxT, nv, L, T, h), inputs)
        self._record("apriori_difference", np.linalg.norm(s1.x - s2.x, axis=-1).max(-1),
                     B.apriori_difference(dx, dxT, L, T, h), inputs)
        self._record("derivative_position", _opnorm(dq1).max(-1), B.apriori_derivative_position(T), inputs)
        self._record("derivative_velocity", _opnorm(dv1).max(-1), B.apriori_derivative_velocity(), inputs)
        self._record("derivative_difference", _opnorm(dq1 - dq2).max(-1),
                     B.apriori_derivative_difference(dx, dxT, L, L_H, T, h), inputs)

        q_exact, dq_exact, reference = self._exact_dense(x, v)
        err = np.linalg.norm(q_exact - s1.x, axis=-1).max(-1)
        derr = _opnorm(dq_exact - dq1).max(-1)
        slack = B.strong_error_bound(self.h_ref, T, L, L_H, nx, nv) if reference else 0.0
        dslack = B.derivative_error_bound(self.h_ref, T, L, L_H, L_I, nx, nv) if reference else 0.0
        self._record("strong_error", err, B.strong_error_bound(h, T, L, L_H, nx, nv) + slack, inputs)
        self._record("derivative_error", derr, B.derivative_error_bound(h, T, L, L_H, L_I, nx, nv) + dslack, inputs)

        same = phi_same_endpoint(x, y, v, p, U)
        shift = np.linalg.norm(same.u - v, axis=-1)
        jac_dev = same.jac - np.eye(U.dim)
        self._record("same_endpoint_shift", T * shift, T * B.same_endpoint_shift_bound(dx, T), inputs)
        self._record("same_endpoint_jacobian", _opnorm(jac_dev), B.same_endpoint_jacobian_bound(dx, L_H, T), inputs)
        fro = np.sum(jac_dev**2, axis=(-2, -1))
        self._record("same_endpoint_overlap", np.sqrt(shift**2 + 2 * fro),
                     B.same_endpoint_overlap_bound(dx, U.dim, L_H, T), inputs)

        exact = phi_exact_endpoint(x, v, p, U, self.mode, self.refinement)
        eshift = np.linalg.norm(exact.u - v, axis=-1)
        ejac = exact.jac - np.eye(U.dim)
        eslack = 7 / 6 * slack
        jslack = B.exact_endpoint_jacobian_bound(self.h_ref, T, L, L_H, L_I, nx, nv) if reference else 0.0
        self._record("exact_endpoint_shift", T * eshift,
                     B.exact_endpoint_shift_bound(h, T, L, L_H, nx, nv) + eslack, inputs)
        self._record("exact_endpoint_jacobian", _opnorm(ejac),
                     B.exact_endpoint_jacobian_bound(h, T, L, L_H, L_I, nx, nv) + jslack, inputs)

        if U.mean_field is not None:
            self._mean_field(inputs, s1, s2, dq1, dv1, dq2, q_exact, dq_exact, reference, same, exact)

    def _mean_field(self, inputs, s1, s2, dq1, dv1, dq2, q_exact, dq_exact, reference, same, exact):
        mf = self.U.mean_field
        n, k = mf.n, mf.k
        T, h = self.p.T, self.p.h
        La, Lb, Lc = mf.effective_constants
        x, v, y, u = (inputs[key] for key in ("x", "v", "y", "u"))

        def bn(a):  # block norms of vectors (..., n*k) -> (..., n)
            return np.linalg.norm(a.reshape(a.shape[:-1] + (n, k)), axis=-1)

        def mat_blocks(a):  # (..., nk, nk) -> operator norms (..., n, n), entry [row, col]
            shaped = a.reshape(a.shape[:-2] + (n, k, n, k))
            return _opnorm(np.swapaxes(shaped, -3, -2))

        sx, sv = bn(x).sum(-1), bn(v).sum(-1)
        sx2, sv2 = (bn(x) ** 2).sum(-1), (bn(v) ** 2).sum(-1)
        smax = np.maximum(bn(x), bn(x + T * v)).sum(-1)
        sdiff = np.maximum(bn(x - y), bn(x - y + T * (v - u))).sum(-1)
        sdx = bn(x - y).sum(-1)

        self._record("mf_apriori_position", bn(s1.x).max(-2).sum(-1), B.mf_apriori_position(smax, La, T, h), inputs)
        self._record("mf_apriori_velocity", bn(s1.v).max(-2).sum(-1),
                     B.mf_apriori_velocity(sv, smax, La, T, h), inputs)
        self._record("mf_apriori_difference", bn(s1.x - s2.x).max(-2).sum(-1),
                     B.mf_apriori_difference(sdiff, La, T, h), inputs)
        blocks_q = mat_blocks(dq1).max(-3)  # (c, n_rows, n_cols), max over s
        self._record("mf_derivative_column", blocks_q.sum(-2).max(-1), 1.2 * T, inputs)
        self._record("mf_derivative_row", blocks_q.sum(-1).max(-1), 1.4 * T, inputs)
        self._record("mf_derivative_velocity", mat_blocks(dv1).max(-3).sum(-2).max(-1), 1.2, inputs)
        self._record("mf_derivative_difference", mat_blocks(dq1 - dq2).max(-3).sum((-2, -1)),
                     B.mf_apriori_derivative_difference(sdiff, La, Lb, T, h), inputs)

        href = self.h_ref
        slack = B.mf_strong_error_bound(href, T, La, Lb, sx, sv, sx2, sv2) if reference else 0.0
        dslack = B.mf_derivative_error_bound(href, T, n, La, Lb, Lc, sx, sv, sx2, sv2) if reference else 0.0
        self._record("mf_strong_error", bn(q_exact - s1.x).max(-2).sum(-1),
                     B.mf_strong_error_bound(h, T, La, Lb, sx, sv, sx2, sv2) + slack, inputs)
        self._record("mf_derivative_error", mat_blocks(dq_exact - dq1).max(-3).sum((-2, -1)),
                     B.mf_derivative_error_bound(h, T, n, La, Lb, Lc, sx, sv, sx2, sv2) + dslack, inputs)

        eye = np.eye(n * k)
        shift_l1 = bn(same.u - v).sum(-1)
        dev = same.jac - eye
        fro = np.sqrt(np.sum(dev**2, axis=(-2, -1)))
        self._record("mf_same_endpoint_shift", T * shift_l1, T * B.mf_same_endpoint_shift_bound(sdx, T), inputs)
        self._record("mf_same_endpoint_jacobian", fro, B.mf_same_endpoint_jacobian_bound(sdx, k, Lb, T), inputs)
        self._record("mf_same_endpoint_jacobian", _opnorm(dev), 0.5, inputs)
        self._record("mf_regularization_overlap", np.sqrt(np.sum((same.u - v) ** 2, -1) + 2 * fro**2),
                     B.mf_regularization_overlap_bound(sdx, k, Lb, T), inputs)

        edev = exact.jac - eye
        eslack = 72 / 65 * slack
        jslack = B.mf_exact_endpoint_jacobian_bound(href, T, n, La, Lb, Lc, sx, sv, sx2, sv2) if reference else 0.0
        self._record("mf_exact_endpoint_shift", T * bn(exact.u - v).sum(-1),
                     B.mf_exact_endpoint_shift_bound(h, T, La, Lb, sx, sv, sx2, sv2) + eslack, inputs)
        self._record("mf_exact_endpoint_jacobian", T * mat_blocks(edev).sum((-2, -1)),
                     B.mf_exact_endpoint_jacobian_bound(h, T, n, La, Lb, Lc, sx, sv, sx2, sv2) + jslack, inputs)
        self._record("mf_exact_endpoint_jacobian", _opnorm(edev), 0.5, inputs)

    # -- checks with their own inputs ------------------------------------------

    def _trapezoid(self, c):
        """Trapezoid-variant quadrature error for f(s) = a sin(w s + phase)."""
        T, h = self.p.T, self.p.h
        rng = self.rng
        a = rng.normal(size=c) * _log_uniform(rng, 0.1, 10.0, c)
        w = _log_uniform(rng, 0.1, 200.0, c)
        ph = rng.uniform(0, 2 * np.pi, c)
        exact = a * (T * np.cos(ph) / w - (np.sin(w * T + ph) - np.sin(ph)) / w**2)
        knots = np.arange(self.p.N + 1) * h
        fk = a[:, None] * np.sin(w[:, None] * knots + ph[:, None])
        weights = h * (T - knots[:-1] - h / 2)
        approx = 0.5 * np.sum((fk[:, :-1] + fk[:, 1:]) * weights, axis=-1)
        B1, B2 = np.abs(a) * w, np.abs(a) * w**2
        self._record("trapezoid", np.abs(exact - approx), B.trapezoid_defect_bound(h, T, B1, B2),
                     {"a": a, "w": w, "phase": ph})

    def _tv_orderings(self):
        """TV(xi, Phi(xi)) <= sqrt(E[...]) <= closed form, for d = 1 by Gauss-Legendre quadrature."""
        if not (self._active("tv_ordering_same_endpoint") or self._active("tv_ordering_exact_endpoint")):
            return
        U, p = self.U, self.p
        T, h = p.T, p.h
        nodes, weights = np.polynomial.legendre.leggauss(400)
        z = 9.0 * nodes
        wz = 9.0 * weights * stats.norm.pdf(z)
        c = self.tv_draws
        x = _log_uniform(self.rng, 0.02, 3.0, c) * self.rng.standard_normal(c)
        y = x + _log_uniform(self.rng, 1e-3, 1.0, c) * self.rng.standard_normal(c)
        X = np.repeat(x[:, None], z.size, 1)[..., None]
        Y = np.repeat(y[:, None], z.size, 1)[..., None]
        V = np.broadcast_to(z[None, :, None], X.shape)
        inputs = {"x": x, "y": y}

        def tv_and_overlap(phi, v):
            log_ratio = 0.5 * (v[..., 0] ** 2 - phi.u[..., 0] ** 2) + phi.logdet
            tv = np.sum(wz * (1 - np.exp(np.minimum(0.0, log_ratio))), axis=-1)
            g = (phi.u[..., 0] - v[..., 0]) ** 2 + 2 * (phi.jac[..., 0, 0] - 1) ** 2
            return tv, np.sqrt(np.sum(wz * g, axis=-1))

        if self._active("tv_ordering_same_endpoint"):
            tv, overlap = tv_and_overlap(phi_same_endpoint(X, Y, V, p, U), V)
            rhs = B.regularization_constant(T, 1, U.L_H) * np.abs(x - y)
            lhs = [tv / np.maximum(overlap, 1e-300), overlap / rhs]
            self._record("tv_ordering_same_endpoint", np.max(np.stack(lhs), 0), 1.0 + 1e-6, inputs)
        if self._active("tv_ordering_exact_endpoint"):
            tv, overlap = tv_and_overlap(phi_exact_endpoint(X, V, p, U, self.mode, self.refinement), V)
            ax = np.abs(x)
            groups = B.bias_constant_groups(1, T, U.L, U.L_H, U.L_I, _PointMoments(ax**2, ax**4))
            rhs = h**2 * np.sqrt(sum(groups.values()))
            self._record("tv_ordering_exact_endpoint",
                         np.maximum(tv / np.maximum(overlap, 1e-300), overlap / rhs), 1.0 + 1e-6, inputs)

    def _oneshot_marginal(self):
        """Pooled second-chain velocities of the one-shot coupling are standard normal."""
        if not self._active("oneshot_marginal"):
            return
        d, trials = self.U.dim, self.marginal_trials
        x = np.zeros(d)
        y = np.full(d, 0.3 / math.sqrt(d))
        cfg = ChainConfig(self.U, self.p, seed=self.seed)
        out = one_shot_step(x, y, cfg, Streams(self.seed, np.arange(trials)))
        eta = out.eta[:, 0]
        se = {"mean": 1 / math.sqrt(trials), "var": math.sqrt(2 / trials), "skew": math.sqrt(6 / trials)}
        z = {"mean": eta.mean() / se["mean"], "var": (eta.var() - 1) / se["var"],
             "skew": stats.skew(eta) / se["skew"]}
        ks = stats.kstest(eta, "norm").statistic
        ks_crit = 1.628 / math.sqrt(trials)  # 1% level
        worst = max(max(abs(val) for val in z.values()) / 4.0, ks / ks_crit)
        self._record("oneshot_marginal", np.array([worst]), np.array([1.0]),
                     {"z_mean": np.array([z["mean"]]), "z_var": np.array([z["var"]]),
                      "z_skew": np.array([z["skew"]]), "ks": np.array([ks])})


@dataclass(frozen=True)
class _PointMoments:
    # moments of a point mass, fed to the strong-error constant
    m2: np.ndarray
    m4: np.ndarray


def run_suite(U: Potential, params: IntegratorParams, draws: int = 10_000, seed: int = 0, **kw) -> list[LemmaTally]:
    return ValidationSuite(U, params, draws, seed, **kw).run()
