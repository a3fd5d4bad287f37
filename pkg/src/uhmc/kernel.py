"""The uHMC transition, synchronous and one-shot couplings, and two-phase meeting times.

Every operation works on one replica or on a batch. States have shape
``batch + (d,)`` and randomness comes from a :class:`~uhmc.rng.Streams`
object whose ``replicas`` array has shape ``batch``. All draws of transition
``step`` are keyed by that step index, so a batch gives exactly the numbers
its members would give when run alone.
"""

from __future__ import annotations

import dataclasses
import enum
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bounds import mean_field_regularization_constant, regularization_constant
from .integrate import IntegratorParams, PhaseState, default_exact_mode, exact_flow, verlet_flow
from .metrics import l1_block_distance
from .model import Potential
from .rng import TAG_ACCEPT, TAG_RESIDUAL, TAG_VELOCITY, Streams
from .variational import REPLAY_TOL, phi_exact_endpoint, phi_exact_endpoint_inverse, phi_same_endpoint

MAX_RESIDUAL_PROPOSALS = 10_000
NOT_MET = -1


class ResidualCapExceeded(RuntimeError):
    """The residual rejection sampler ran out of proposals."""


@dataclass(frozen=True)
class ChainConfig:
    potential: Potential
    params: IntegratorParams
    seed: int = 0
    replica_id: int = 0
    allow_unconstrained: bool = False

    def __post_init__(self):
        if not (self.allow_unconstrained or self.params.constraint_ok(self.potential.L)):
            raise ValueError(
                f"L (T^2 + T h) = {self.params.constraint_value(self.potential.L):.4g} exceeds 1/6; "
                "set allow_unconstrained to run anyway")

    def streams(self, replicas=None) -> Streams:
        return Streams(self.seed, self.replica_id if replicas is None else replicas)


class GradientCounter:
    """Wraps a potential so that gradient evaluations are tallied per state."""

    def __init__(self, potential: Potential):
        self.count = 0
        self._lock = threading.Lock()
        base = potential.gradient

        def gradient(x):
            x = np.asarray(x)
            with self._lock:
                self.count += int(np.prod(x.shape[:-1], dtype=np.int64))
            return base(x)

        self.potential = dataclasses.replace(potential, gradient=gradient)


def _velocity(rng: Streams, step: int, d: int):
    return rng.normal(step, TAG_VELOCITY, (d,))


def _endpoint(x, v, cfg: ChainConfig):
    return verlet_flow(PhaseState(x, v), cfg.params, cfg.potential).positions[..., -1, :]


def _batched(x, rng: Streams, d: int):
    return np.array(np.broadcast_to(np.asarray(x, dtype=float), rng.replicas.shape + (d,)))


def uhmc_step(x, cfg: ChainConfig, rng: Optional[Streams] = None, step: int = 0):
    """One transition: fresh Gaussian velocity, then Verlet for duration T."""
    rng = cfg.streams() if rng is None else rng
    d = cfg.potential.dim
    return _endpoint(_batched(x, rng, d), _velocity(rng, step, d), cfg)


def uhmc_run(x0, m: int, cfg: ChainConfig, rng: Optional[Streams] = None, start_step: int = 0) -> list:
    """States ``[x0, X_1, ..., X_m]`` of the chain."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    rng = cfg.streams() if rng is None else rng
    states = [_batched(x0, rng, cfg.potential.dim)]
    for n in range(m):
        states.append(uhmc_step(states[-1], cfg, rng, start_step + n))
    return states


class Branch(str, enum.Enum):
    ACCEPTED_PHI = "accepted_phi"
    RESIDUAL = "residual"
    SYNCHRONOUS = "synchronous"


@dataclass(frozen=True)
class CouplingOutcome:
    """Result of one coupled transition; array fields carry the batch shape."""

    x_next: np.ndarray
    y_next: np.ndarray
    met: np.ndarray
    alpha: np.ndarray
    branch: np.ndarray  # Branch values
    residual_draws: np.ndarray
    eta: np.ndarray  # velocity used by the second chain


def _log_gauss_ratio(v, u, logdet):
    # log of phi(u) |det| / phi(v) for the standard Gaussian density phi
    return 0.5 * (np.sum(v * v, axis=-1) - np.sum(u * u, axis=-1)) + logdet


class _OneShotMaps:
    """Forward map Phi, its inverse and the Y-chain endpoint for one coupling mode."""

    def __init__(self, cfg: ChainConfig, mode: str):
        if mode not in ("same_endpoint", "exact_endpoint"):
            raise ValueError(f"unknown one-shot mode {mode!r}")
        self.cfg, self.mode = cfg, mode
        self.exact_mode = default_exact_mode(cfg.potential)

    def forward(self, x, y, v):
        p, U = self.cfg.params, self.cfg.potential
        if self.mode == "same_endpoint":
            return phi_same_endpoint(x, y, v, p, U)
        return phi_exact_endpoint(x, v, p, U, self.exact_mode)

    def inverse(self, x, y, w):
        p, U = self.cfg.params, self.cfg.potential
        if self.mode == "same_endpoint":
            return phi_same_endpoint(y, x, w, p, U)
        return phi_exact_endpoint_inverse(x, w, p, U, self.exact_mode)

    def y_endpoint(self, x, y, eta):
        if self.mode == "same_endpoint":
            return _endpoint(y, eta, self.cfg)
        p = self.cfg.params
        return exact_flow(PhaseState(x, eta), p.T, self.cfg.potential, self.exact_mode, h=p.h).x


def one_shot_step(x, y, cfg: ChainConfig, rng: Optional[Streams] = None, mode: str = "same_endpoint",
                  step: int = 0, debug: bool = False) -> CouplingOutcome:
    """Maximal coupling of the two velocity laws linked by the map Phi.

    With probability alpha(xi) the second chain uses Phi(xi) and lands on the
    first chain's endpoint, which is then copied so the chains coincide
    bitwise. Otherwise its velocity is drawn from the residual law by
    rejection. In ``exact_endpoint`` mode the second chain follows the exact
    Hamiltonian flow from ``x`` and ``y`` is ignored.
    """
    rng = cfg.streams() if rng is None else rng
    d = cfg.potential.dim
    x = _batched(x, rng, d)
    y = x.copy() if mode == "exact_endpoint" else _batched(y, rng, d)
    maps = _OneShotMaps(cfg, mode)
    xi = _velocity(rng, step, d)
    x_next = _endpoint(x, xi, cfg)

    batch = x.shape[:-1]
    alpha = np.ones(batch)
    eta = xi.copy()
    same = np.all(x == y, axis=-1) if mode == "same_endpoint" else np.zeros(batch, dtype=bool)
    todo = np.flatnonzero(~same.ravel())
    if todo.size:
        xf, yf, vf = x.reshape(-1, d)[todo], y.reshape(-1, d)[todo], xi.reshape(-1, d)[todo]
        phi = maps.forward(xf, yf, vf)
        alpha.reshape(-1)[todo] = np.exp(np.minimum(0.0, _log_gauss_ratio(vf, phi.u, phi.logdet)))
        eta.reshape(-1, d)[todo] = phi.u
        if debug:
            replay = _endpoint(yf, phi.u, cfg) if mode == "same_endpoint" else maps.y_endpoint(xf, yf, phi.u)
            gap = np.max(np.abs(replay - x_next.reshape(-1, d)[todo]))
            assert gap <= REPLAY_TOL * (1 + np.max(np.abs(replay))), f"replay gap {gap:.3g}"

    accepted = rng.uniform(step, TAG_ACCEPT) < alpha
    y_next = x_next.copy()
    draws = np.zeros(batch, dtype=np.int64)
    rejected = np.flatnonzero(~accepted.ravel())
    if rejected.size:
        resid, count = _residual_velocities(maps, x, y, rng, step, rejected)
        draws.reshape(-1)[rejected] = count
        eta.reshape(-1, d)[rejected] = resid
        xr, yr = x.reshape(-1, d)[rejected], y.reshape(-1, d)[rejected]
        y_next.reshape(-1, d)[rejected] = maps.y_endpoint(xr, yr, resid)
    met = np.all(x_next == y_next, axis=-1)
    branch = np.where(accepted, Branch.ACCEPTED_PHI.value, Branch.RESIDUAL.value)
    return CouplingOutcome(x_next, y_next, met, alpha, branch, draws, eta)


def _residual_velocities(maps: _OneShotMaps, x, y, rng: Streams, step: int, members):
    """Rejection sampler for the residual law, run for flat batch ``members``."""
    d = x.shape[-1]
    flat_rng = Streams(rng.seed, rng.replicas.reshape(-1))
    xf, yf = x.reshape(-1, d)[members], y.reshape(-1, d)[members]
    eta = np.empty((members.size, d))
    draws = np.zeros(members.size, dtype=np.int64)
    pending = np.arange(members.size)
    for attempt in range(MAX_RESIDUAL_PROPOSALS):
        sub = flat_rng.subset(members[pending])
        w = sub.normal(step, TAG_RESIDUAL + 2 * attempt, (d,))
        coin = sub.uniform(step, TAG_RESIDUAL + 2 * attempt + 1)
        inv = maps.inverse(xf[pending], yf[pending], w)
        ratio = np.exp(np.minimum(0.0, _log_gauss_ratio(w, inv.u, inv.logdet)))
        draws[pending] += 1
        ok = coin < 1.0 - ratio
        eta[pending[ok]] = w[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return eta, draws
    raise ResidualCapExceeded(
        f"{pending.size} residual samplers exceeded {MAX_RESIDUAL_PROPOSALS} proposals at step {step}")


def synchronous_step(x, y, cfg: ChainConfig, rng: Optional[Streams] = None, step: int = 0) -> CouplingOutcome:
    """Both chains use the same velocity draw."""
    rng = cfg.streams() if rng is None else rng
    d = cfg.potential.dim
    x, y = _batched(x, rng, d), _batched(y, rng, d)
    xi = _velocity(rng, step, d)
    x_next, y_next = _endpoint(x, xi, cfg), _endpoint(y, xi, cfg)
    met = np.all(x_next == y_next, axis=-1)
    batch = x.shape[:-1]
    return CouplingOutcome(x_next, y_next, met, met.astype(float),
                           np.full(batch, Branch.SYNCHRONOUS.value), np.zeros(batch, dtype=np.int64), xi)


def model_distance(U: Potential, x, y):
    """Euclidean distance, or the l1-of-blocks distance for mean-field models."""
    mf = U.mean_field
    if mf is not None:
        return l1_block_distance(x, y, mf.n, mf.k)
    return np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)


@dataclass(frozen=True)
class ThresholdPolicy:
    """When to try a one-shot coupling during the two-phase scheme."""

    threshold: float
    max_consecutive: int = 5
    max_steps: int = 10_000
    mode: str = "same_endpoint"

    def __post_init__(self):
        if not self.threshold > 0 or self.max_consecutive < 1 or self.max_steps < 1:
            raise ValueError("invalid threshold policy")

    @classmethod
    def default(cls, U: Potential, params: IntegratorParams, **kw) -> "ThresholdPolicy":
        """threshold = min(0.1, 1 / (3 * prefactor)), which makes a one-shot attempt succeed w.p. >= 2/3."""
        if U.mean_field is not None:
            La, Lb, _ = U.mean_field.effective_constants
            pref = mean_field_regularization_constant(params.T, U.mean_field.k, Lb)
        else:
            pref = regularization_constant(params.T, U.dim, U.L_H)
        return cls(min(0.1, 1.0 / (3.0 * pref)), **kw)


@dataclass(frozen=True)
class CouplingTimeRecord:
    """Meeting times of a batch of coupled chains (``NOT_MET`` when capped)."""

    tau: np.ndarray
    phase1_steps: np.ndarray
    oneshot_attempts: np.ndarray
    heuristic: bool = False
    trace: Optional[np.ndarray] = None  # distances, shape (steps + 1,) + batch

    @property
    def met(self) -> np.ndarray:
        return self.tau != NOT_MET


def coupled_meeting_time(x0, y0, cfg: ChainConfig, rng: Optional[Streams] = None,
                         policy: Optional[ThresholdPolicy] = None, trace: bool = False) -> CouplingTimeRecord:
    """Run synchronous steps until the chains are close, then attempt one-shot couplings.

    A member attempts a one-shot step while its distance is at most the
    threshold, up to ``policy.max_consecutive`` attempts in a row; then one
    synchronous step resets the count. Members stop once they have met.
    """
    U = cfg.potential
    rng = cfg.streams() if rng is None else rng
    policy = ThresholdPolicy.default(U, cfg.params) if policy is None else policy
    if policy.mode != "same_endpoint":
        raise ValueError("meeting times need the same_endpoint one-shot mode")
    d = U.dim
    x, y = _batched(x0, rng, d).reshape(-1, d), _batched(y0, rng, d).reshape(-1, d)
    flat = Streams(rng.seed, rng.replicas.reshape(-1))
    size = x.shape[0]
    tau = np.full(size, NOT_MET, dtype=np.int64)
    sync_steps = np.zeros(size, dtype=np.int64)
    attempts = np.zeros(size, dtype=np.int64)
    consecutive = np.zeros(size, dtype=np.int64)
    dist = model_distance(U, x, y)
    tau[np.all(x == y, axis=-1)] = 0
    history = [dist.copy()] if trace else None

    for n in range(policy.max_steps):
        active = tau == NOT_MET
        if not active.any():
            break
        try_shot = active & (dist <= policy.threshold) & (consecutive < policy.max_consecutive)
        sync = active & ~try_shot
        for members, shot in ((np.flatnonzero(try_shot), True), (np.flatnonzero(sync), False)):
            if members.size == 0:
                continue
            sub = flat.subset(members)
            if shot:
                out = one_shot_step(x[members], y[members], cfg, sub, policy.mode, step=n)
            else:
                out = synchronous_step(x[members], y[members], cfg, sub, step=n)
            x[members], y[members] = out.x_next, out.y_next
            tau[members[out.met]] = n + 1
        attempts[try_shot] += 1
        consecutive[try_shot] += 1
        consecutive[sync] = 0
        sync_steps[sync] += 1
        dist = np.where(tau == NOT_MET, model_distance(U, x, y), 0.0)
        if trace:
            history.append(dist.copy())

    shape = rng.replicas.shape
    conv = U.convexity
    return CouplingTimeRecord(
        tau.reshape(shape), sync_steps.reshape(shape), attempts.reshape(shape),
        heuristic=conv is None or conv.R > 0,
        trace=None if history is None else np.stack(history).reshape((len(history),) + shape))
