"""Target potentials with derivative access and declared smoothness constants.

All evaluation functions broadcast over leading axes: ``x`` of shape
``(..., dim)`` gives energies of shape ``(...)``, gradients of shape
``(..., dim)`` and Hessians of shape ``(..., dim, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class ConvexityProfile:
    """Strong convexity with constant ``K`` outside separations of size ``R``."""

    K: float
    R: float = 0.0

    def __post_init__(self):
        if not self.K > 0 or self.R < 0:
            raise ValueError("need K > 0 and R >= 0")


@dataclass(frozen=True)
class Potential:
    """A smooth potential U on R^dim.

    ``L``, ``L_H`` and ``L_I`` bound the operator norms of the second, third
    and fourth derivatives. ``quadratic`` holds the constant Hessian when U is
    a quadratic form, which enables closed-form Hamiltonian flows.
    """

    dim: int
    energy: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    L: float
    L_H: float = 0.0
    L_I: float = 0.0
    name: str = "custom"
    convexity: Optional[ConvexityProfile] = None
    quadratic: Optional[np.ndarray] = field(default=None, repr=False)
    mean_field: Optional["MeanFieldPotential"] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def hessian_vec(self, x, w):
        return np.einsum("...ij,...j->...i", self.hessian(x), w)


def _diag_matrix(values):
    values = np.asarray(values)
    return values[..., :, None] * np.eye(values.shape[-1])


def make_gaussian(dim: int, omega2=1.0) -> Potential:
    """U(x) = sum_i omega2_i x_i^2 / 2.

    ``omega2`` may be a scalar (isotropic) or a vector of per-coordinate
    squared frequencies.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    w2 = np.broadcast_to(np.asarray(omega2, dtype=float), (dim,)).copy()
    if np.any(w2 <= 0) or not np.all(np.isfinite(w2)):
        raise ValueError("omega2 must be positive")
    w2.setflags(write=False)
    return Potential(
        dim=dim,
        energy=lambda x: 0.5 * np.sum(w2 * np.square(x), axis=-1),
        gradient=lambda x: w2 * np.asarray(x),
        hessian=lambda x: np.broadcast_to(np.diag(w2), np.shape(x) + (dim,)),
        L=float(w2.max()),
        name="gaussian",
        convexity=ConvexityProfile(K=float(w2.min()), R=0.0),
        quadratic=np.diag(w2),
        params={"dim": dim, "omega2": w2.tolist() if np.ptp(w2) else float(w2[0])},
    )


def make_free(dim: int) -> Potential:
    """U = 0. Verlet is exact for this potential."""
    zero = np.zeros((dim, dim))
    return Potential(
        dim=dim,
        energy=lambda x: np.zeros(np.shape(x)[:-1]),
        gradient=lambda x: np.zeros(np.shape(x)),
        hessian=lambda x: np.broadcast_to(zero, np.shape(x) + (dim,)),
        L=0.0,
        name="free",
        quadratic=zero,
        params={"dim": dim},
    )


def make_double_well_tail_convex(dim: int, a: float) -> Potential:
    """Cosine-perturbed quadratic U(x) = |x|^2/2 + a sum_i (cos x_i - 1).

    The constant shift keeps U(0) = 0. The Hessian is diag(1 - a cos x_i),
    so L = 1 + |a|, the third and fourth derivatives are bounded by |a|, and
    for |a| < 1 the potential is strongly convex with K = 1 - |a|.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    if not abs(a) < 1:
        raise ValueError("|a| must be < 1")
    a = float(a)
    return Potential(
        dim=dim,
        energy=lambda x: np.sum(0.5 * np.square(x) + a * (np.cos(x) - 1.0), axis=-1),
        gradient=lambda x: np.asarray(x) - a * np.sin(x),
        hessian=lambda x: _diag_matrix(1.0 - a * np.cos(x)),
        L=1.0 + abs(a),
        L_H=abs(a),
        L_I=abs(a),
        name="cosine",
        convexity=ConvexityProfile(K=1.0 - abs(a), R=0.0),
        quadratic=np.eye(dim) if a == 0 else None,
        params={"dim": dim, "a": a},
    )


def make_cosine_interaction(k: int) -> Potential:
    """Even pair potential W(z) = sum_i (1 - cos z_i) on R^k."""
    return Potential(
        dim=k,
        energy=lambda z: np.sum(1.0 - np.cos(z), axis=-1),
        gradient=lambda z: np.sin(z),
        hessian=lambda z: _diag_matrix(np.cos(z)),
        L=1.0,
        L_H=1.0,
        L_I=1.0,
        name="cosine_pair",
        params={"k": k},
    )


@dataclass(frozen=True)
class MeanFieldPotential:
    """n particles in R^k with confinement V and pair interaction W.

    U(x) = sum_i V(x^i) + (eps/n) sum_{i != l} W(x^i - x^l).
    """

    n: int
    k: int
    V: Potential
    W: Potential
    eps: float
    w_even: bool = True

    def __post_init__(self):
        if self.n < 2 or self.k < 1:
            raise ValueError("need n >= 2 and k >= 1")
        if self.V.dim != self.k or self.W.dim != self.k:
            raise ValueError("V and W must act on R^k")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    L = property(lambda self: self.V.L)
    L_H = property(lambda self: self.V.L_H)
    L_I = property(lambda self: self.V.L_I)
    Lt = property(lambda self: self.W.L)
    Lt_H = property(lambda self: self.W.L_H)
    Lt_I = property(lambda self: self.W.L_I)

    @property
    def effective_constants(self):
        """(L + 4 eps Lt, L_H + 8 eps Lt_H, L_I + 14 eps Lt_I)."""
        e = self.eps
        return (self.L + 4 * e * self.Lt, self.L_H + 8 * e * self.Lt_H, self.L_I + 14 * e * self.Lt_I)

    def blocks(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.n, self.k))


def mf_assemble(mfp: MeanFieldPotential) -> Potential:
    """Assemble the mean-field energy as a Potential on R^{nk}."""
    n, k, V, W, eps = mfp.n, mfp.k, mfp.V, mfp.W, mfp.eps
    dim = n * k
    off = ~np.eye(n, dtype=bool)  # pairs i != l

    def pair_diffs(x):
        b = mfp.blocks(x)
        return b, b[..., :, None, :] - b[..., None, :, :]  # [i, l] = x^i - x^l

    def energy(x):
        b, dz = pair_diffs(x)
        inter = np.sum(np.where(off, W.energy(dz), 0.0), axis=(-2, -1))
        return np.sum(V.energy(b), axis=-1) + (eps / n) * inter

    def gradient(x):
        b, dz = pair_diffs(x)
        gw = np.where(off[..., None], W.gradient(dz), 0.0)
        g = V.gradient(b) + (eps / n) * (gw.sum(axis=-2) - gw.sum(axis=-3))
        return g.reshape(np.shape(x))

    def hessian(x):
        b, dz = pair_diffs(x)
        hw = np.where(off[..., None, None], W.hessian(dz), 0.0)
        pair = hw + np.swapaxes(hw, -3, -4)  # D2W(x^j - x^l) + D2W(x^l - x^j)
        blocks = -(eps / n) * pair
        diag = V.hessian(b) + (eps / n) * pair.sum(axis=-3)
        idx = np.arange(n)
        blocks[..., idx, idx, :, :] = diag
        # (..., n, n, k, k) -> (..., n*k, n*k)
        return np.swapaxes(blocks, -3, -2).reshape(np.shape(x)[:-1] + (dim, dim))

    quad = None
    if V.quadratic is not None and W.quadratic is not None:
        quad = hessian(np.zeros(dim))
    L, L_H, L_I = mfp.effective_constants
    convexity = None
    if V.convexity is not None and V.convexity.R == 0:
        # an even convex W only adds convexity; otherwise the interaction
        # Hessian can remove at most 4 eps Lt
        K = V.convexity.K - (0.0 if W.convexity is not None else 4 * eps * W.L)
        if K > 0:
            convexity = ConvexityProfile(K=K, R=0.0)
    return Potential(
        dim=dim,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        L=L,
        L_H=L_H,
        L_I=L_I,
        name="mean_field",
        convexity=convexity,
        quadratic=quad,
        mean_field=mfp,
        params={"n": n, "k": k, "eps": eps, "V": V.name, "W": W.name},
    )


@dataclass(frozen=True)
class TargetMoments:
    """Second and fourth moments of the target, total and per particle."""

    m2: float
    m4: float
    per_particle_m2: Optional[tuple] = None
    per_particle_m4: Optional[tuple] = None
    source: str = "analytic"

    def __post_init__(self):
        if self.source not in ("analytic", "monte_carlo"):
            raise ValueError("source must be 'analytic' or 'monte_carlo'")
        vals = [self.m2, self.m4, *(self.per_particle_m2 or ()), *(self.per_particle_m4 or ())]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("moments must be finite and nonnegative")
        if self.m4 < self.m2**2 * (1 - 1e-12):
            raise ValueError("m4 >= m2^2 violated")

    @property
    def sum_m2(self):
        return float(np.sum(self.per_particle_m2)) if self.per_particle_m2 is not None else self.m2

    @property
    def sum_m4(self):
        return float(np.sum(self.per_particle_m4)) if self.per_particle_m4 is not None else self.m4


def gaussian_moments(U: Potential) -> TargetMoments:
    """Exact moments of exp(-U) for quadratic U, per particle when mean-field."""
    if U.quadratic is None:
        raise ValueError("analytic moments need a quadratic potential")
    cov = np.linalg.inv(U.quadratic)
    m2 = float(np.trace(cov))
    m4 = m2**2 + 2.0 * float(np.sum(cov * cov))
    pp2 = pp4 = None
    if U.mean_field is not None:
        k = U.mean_field.k
        pp2, pp4 = [], []
        for i in range(U.mean_field.n):
            c = cov[i * k:(i + 1) * k, i * k:(i + 1) * k]
            t = float(np.trace(c))
            pp2.append(t)
            pp4.append(t**2 + 2.0 * float(np.sum(c * c)))
        pp2, pp4 = tuple(pp2), tuple(pp4)
    return TargetMoments(m2, m4, pp2, pp4, source="analytic")


def monte_carlo_moments(samples, n: Optional[int] = None, inflation: float = 0.2) -> TargetMoments:
    """Moment estimates from samples of shape (num, dim), inflated by ``1 + inflation``."""
    x = np.asarray(samples, dtype=float)
    sq = np.sum(x * x, axis=-1)
    m2, m4 = float(np.mean(sq)), float(np.mean(sq * sq))
    pp2 = pp4 = None
    if n is not None:
        b = x.reshape(x.shape[0], n, -1)
        psq = np.sum(b * b, axis=-1)
        s = 1.0 + inflation
        pp2 = tuple(float(v) * s for v in psq.mean(axis=0))
        pp4 = tuple(float(v) * s for v in (psq * psq).mean(axis=0))
    return TargetMoments(m2 * (1 + inflation), m4 * (1 + inflation), pp2, pp4, source="monte_carlo")


def finite_difference_gradient(U: Potential, x):
    """Central differences with step 1e-5 (1 + |x|)."""
    x = np.asarray(x, dtype=float)
    step = 1e-5 * (1.0 + np.linalg.norm(x))
    g = np.empty_like(x)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = step
        g[..., i] = (U.energy(x + e) - U.energy(x - e)) / (2 * step)
    return g


def finite_difference_hessian_vec(U: Potential, x, w):
    x = np.asarray(x, dtype=float)
    step = 1e-5 * (1.0 + np.linalg.norm(x))
    return (U.gradient(x + step * w) - U.gradient(x - step * w)) / (2 * step)


def secant_lipschitz_ratio(U: Potential, x, y):
    """|grad U(x) - grad U(y)| / |x - y| for batches of pairs."""
    num = np.linalg.norm(U.gradient(x) - U.gradient(y), axis=-1)
    return num / np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)


def shipped_potentials() -> list[Potential]:
    """Small catalogue used by tests and the validation harness."""
    gauss = make_gaussian
    return [
        gauss(1, 1.0),
        gauss(2, [1.0, 0.4]),
        make_double_well_tail_convex(1, 0.5),
        make_double_well_tail_convex(3, -0.6),
        mf_assemble(MeanFieldPotential(3, 2, make_double_well_tail_convex(2, 0.3), make_cosine_interaction(2), 0.1)),
        mf_assemble(MeanFieldPotential(2, 1, gauss(1, 1.0), gauss(1, 1.0), 0.2)),
    ]
