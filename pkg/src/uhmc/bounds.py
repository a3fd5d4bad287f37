"""Closed-form evaluators for the contraction, mixing, bias and one-shot bounds.

The first half holds the headline constants (regularization prefactor, mixing
time, TV bias, rate certificates). The second half holds the right-hand sides
of the trajectory and velocity-map inequalities that the validation suite
checks against simulated quantities. Everything here is a pure function.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import MeanFieldPotential, Potential, TargetMoments

STEP_CONSTRAINT = 1.0 / 6.0


@dataclass(frozen=True)
class RateCertificate:
    """Constants (c, M1) of a geometric W1 contraction M1 exp(-c m)."""

    c: float
    M1: float
    source: str
    validity: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return all(self.validity.values())


@dataclass(frozen=True)
class BoundReport:
    name: str
    value: float
    inputs: dict
    flags: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "inputs": self.inputs,
                "flags": self.flags, "details": self.details}


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


# -- headline constants -------------------------------------------------------

def regularization_constant(T: float, d: int, L_H: float) -> float:
    """Factor turning a W1 distance into a TV distance after one uHMC step."""
    return 1.5 * math.sqrt(T**-2 + 27.0 * d * L_H**2 * T**4)


def mean_field_regularization_constant(T: float, k: int, L_H_eff: float) -> float:
    """Particle-number-free prefactor for the l1-of-blocks Wasserstein distance."""
    return 1.5 * math.sqrt(T**-2 + 34.0 * k * L_H_eff**2 * T**4)


def tv_contraction_bound(m: int, cert: RateCertificate, w1_init: float, prefactor: float) -> float:
    """Upper bound on TV(mu~, nu pi~^(m+1)) given W1(mu~, nu) = w1_init."""
    return prefactor * cert.M1 * math.exp(-cert.c * m) * w1_init


def mixing_time_bound(eps: float, cert: RateCertificate, w1_init: float, T: float, d: int,
                      L_H: float, prefactor: Optional[float] = None) -> float:
    """Steps after which TV to the uHMC invariant law is at most ``eps``.

    ``prefactor`` defaults to the general regularization constant; pass the
    mean-field one to get the mean-field corollary.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if prefactor is None:
        prefactor = regularization_constant(T, d, L_H)
    arg = 2.0 * prefactor * cert.M1 * w1_init / (2.0 * eps)  # 2 * prefactor = 3 sqrt(...)
    return 2.0 + max(0.0, math.log(arg)) / cert.c if arg > 0 else 2.0


def bias_constant_groups(d: int, T: float, L: float, L_H: float, L_I: float,
                         moments: TargetMoments) -> dict:
    """Terms under the square root of the strong-error TV constant, grouped by power of d."""
    m2, m4 = moments.m2, moments.m4
    return {
        "d3": d**3 * (4 * L_I**2 * T**4 + 14 * L_H**2 * L_I * T**6 + 14 * L_H**4 * T**8),
        "d2": d**2 * (35 * L_H**2 * T**2 + 8 * L_I**2 * T**4 + 28 * L_H**2 * L_I * T**6 + 28 * L_H**4 * T**8),
        "d1": d * (16 * L**2 + 4 * L_H**2 * T**2),
        "m2": (2 * d * L_H**2 + L**2 * T**-2) * m2,
        "m4": (d * L_I**2 + d * L_H**2 * L_I * T**2 + d * L_H**4 * T**4 + L_H**2 * T**-2) * m4,
    }


def bias_constant_C(d: int, T: float, L: float, L_H: float, L_I: float, moments: TargetMoments) -> float:
    return math.sqrt(sum(bias_constant_groups(d, T, L, L_H, L_I, moments).values()))


def tv_bias_bound(h: float, T: float, d: int, L_H: float, M2: float, C: float,
                  prefactor: Optional[float] = None) -> float:
    """Upper bound on TV(mu, mu~). ``M2`` bounds W1(mu, mu~) / h^2."""
    if prefactor is None:
        prefactor = regularization_constant(T, d, L_H)
    return h**2 * (prefactor * M2 + C)


def _bez_validity(K, L, R, T, h, scale=1.0):
    # step-size preconditions of the reflection-coupling rates, with h1 = h
    cap = min(3 * K / (10 * L), 0.25)
    if R > 0:
        cap = min(cap, 3 * K / (256 * 5 * 2**6 * L * R**2 * (L + K)))
    return {
        "duration": L * (T + h) ** 2 <= scale * cap,
        "step": h <= K * T / (525 * L + 235 * K),
    }


def logconcave_rates(K: float, L: float, R: float, T: float, h: float) -> RateCertificate:
    """Contraction certificate for potentials strongly convex at separations >= R."""
    if not (K > 0 and L >= K):
        raise ValueError("need 0 < K <= L")
    steps = {"step_constraint": L * (T**2 + T * h) <= STEP_CONSTRAINT * (1 + 1e-12)}
    if R == 0:
        validity = {"LT2_le_quarter": L * T**2 <= 0.25, **steps}
        return RateCertificate(K * T**2 / 10.0, 1.0, "logconcave_synchronous", validity)
    root = math.sqrt((L + K) / K)
    M1 = math.exp(2.5 * (1 + 4 * R / T * root))
    c = K * T**2 / 156.0 * math.exp(-10 * R / T * root)
    return RateCertificate(c, M1, "nonconvex_BEZ", {**_bez_validity(K, L, R, T, h), **steps})


def mean_field_rates(K: float, L: float, R: float, T: float, h: float, eps: float, Lt: float,
                     n: int) -> RateCertificate:
    """Componentwise-coupling certificate in the l1-of-blocks metric.

    ``M1`` holds the l1 prefactor M. Against the Euclidean W1 distance the
    prefactor is sqrt(n) M, see :func:`euclidean_prefactor`.
    """
    root = math.sqrt((L + K) / K)
    M = math.exp(2.5 * (1 + 4 * R / T * root))
    c = K * T**2 / 156.0 * math.exp(-10 * R / T * root)
    eps_cap = min(K / 6, 0.5 * (K / (36 * 149)) ** 2 * (T + 8 * R * root) ** 2 * math.exp(-40 * R / T * root))
    validity = {
        **_bez_validity(K, L, R, T, h, scale=0.6),
        "interaction": abs(eps) * Lt < eps_cap,
        "step_constraint": (L + 4 * eps * Lt) * (T**2 + T * h) <= STEP_CONSTRAINT * (1 + 1e-12),
    }
    return RateCertificate(c, M, "mean_field_BS", validity)


def euclidean_prefactor(cert: RateCertificate, n: int) -> float:
    return math.sqrt(n) * cert.M1


def mean_field_constant_groups(n: int, k: int, T: float, L_eff: float, L_H_eff: float, L_I_eff: float,
                               sum_m2: float, sum_m4: float) -> dict:
    """Terms under the square root of the mean-field strong-error TV constant.

    Uses the effective constants L + 4 eps Lt, L_H + 8 eps Lt_H and
    L_I + 14 eps Lt_I.
    """
    La, Lb, Lc = L_eff, L_H_eff, L_I_eff
    return {
        "n2k": n**2 * k * (17 * La**2 + 28 * Lb**2 * T**2 + 104 * k * Lb**2 * T**2
                           + 180 * (2 * k + k**2) * T**4 * (Lc + Lb**2 * T**2) ** 2),
        "m2": n * (10 * k * Lb**2 + 7 * La**2 * T**-2) * sum_m2,
        "m4": n * (40 * k * (Lc + Lb**2 * T**2) ** 2 + 7 * Lb**2 * T**-2) * sum_m4,
    }


def mean_field_constant_C(n, k, T, L_eff, L_H_eff, L_I_eff, sum_m2, sum_m4) -> float:
    return math.sqrt(sum(mean_field_constant_groups(n, k, T, L_eff, L_H_eff, L_I_eff, sum_m2, sum_m4).values()))


def mean_field_bounds(mfp: MeanFieldPotential, T: float, h: float, moments: TargetMoments,
                      cert: Optional[RateCertificate] = None, w1_init: Optional[float] = None,
                      eps_tv: Optional[float] = None, M2: Optional[float] = None) -> list[BoundReport]:
    """Mean-field report set: prefactor, strong-error constant, mixing and bias bounds.

    Mixing and bias reports are included when the inputs they need are given.
    ``w1_init`` is the l1-of-blocks Wasserstein distance to the invariant law.
    """
    La, Lb, Lc = mfp.effective_constants
    base = {"n": mfp.n, "k": mfp.k, "eps": mfp.eps, "T": T, "h": h,
            "L": mfp.L, "L_H": mfp.L_H, "L_I": mfp.L_I, "Lt": mfp.Lt, "Lt_H": mfp.Lt_H, "Lt_I": mfp.Lt_I}
    flags = {"step_constraint": La * (T**2 + T * h) <= STEP_CONSTRAINT * (1 + 1e-12),
             "w_even": mfp.w_even}
    pref = mean_field_regularization_constant(T, mfp.k, Lb)
    groups = mean_field_constant_groups(mfp.n, mfp.k, T, La, Lb, Lc, moments.sum_m2, moments.sum_m4)
    C = math.sqrt(sum(groups.values()))
    out = [
        BoundReport("mf_regularization_constant", pref, base, flags),
        BoundReport("mf_bias_constant_C", C, {**base, "sum_m2": moments.sum_m2, "sum_m4": moments.sum_m4,
                                              "moments_source": moments.source}, flags, groups),
    ]
    if cert is not None and w1_init is not None and eps_tv is not None:
        t = mixing_time_bound(eps_tv, cert, w1_init, T, mfp.n * mfp.k, mfp.L_H, prefactor=pref)
        out.append(BoundReport("mf_mixing_time_bound", t,
                               {**base, "eps_tv": eps_tv, "w1_l1_init": w1_init, "c": cert.c, "M": cert.M1},
                               {**flags, **{f"rate_{k}": v for k, v in cert.validity.items()}},
                               {"source": cert.source}))
    if M2 is not None:
        out.append(BoundReport("mf_tv_bias_bound", tv_bias_bound(h, T, 0, 0.0, M2, C, prefactor=pref),
                               {**base, "M2": M2}, flags))
    return out


def general_bounds(U: Potential, T: float, h: float, moments: Optional[TargetMoments] = None,
                   cert: Optional[RateCertificate] = None, w1_init: Optional[float] = None,
                   eps_tv: Optional[float] = None, M2: Optional[float] = None) -> list[BoundReport]:
    d = U.dim
    base = {"d": d, "T": T, "h": h, "L": U.L, "L_H": U.L_H, "L_I": U.L_I}
    flags = {"step_constraint": U.L * (T**2 + T * h) <= STEP_CONSTRAINT * (1 + 1e-12)}
    pref = regularization_constant(T, d, U.L_H)
    out = [BoundReport("regularization_constant", pref, base, flags)]
    C = None
    if moments is not None:
        groups = bias_constant_groups(d, T, U.L, U.L_H, U.L_I, moments)
        C = math.sqrt(sum(groups.values()))
        out.append(BoundReport("bias_constant_C", C, {**base, "m2": moments.m2, "m4": moments.m4,
                                                      "moments_source": moments.source}, flags, groups))
    if cert is not None:
        out.append(BoundReport("rate_certificate", cert.c, {**base, "M1": cert.M1},
                               {f"rate_{k}": v for k, v in cert.validity.items()}, {"source": cert.source}))
        if w1_init is not None and eps_tv is not None:
            t = mixing_time_bound(eps_tv, cert, w1_init, T, d, U.L_H)
            out.append(BoundReport("mixing_time_bound", t, {**base, "eps_tv": eps_tv, "w1_init": w1_init,
                                                            "c": cert.c, "M1": cert.M1}, flags))
    if M2 is not None and C is not None:
        out.append(BoundReport("tv_bias_bound", tv_bias_bound(h, T, d, U.L_H, M2, C), {**base, "M2": M2}, flags))
    return out


def overlap_bound_mc(phi_sampler: Callable, trials: int, rng: Optional[np.random.Generator] = None,
                     dim: Optional[int] = None) -> tuple[float, float]:
    """Monte Carlo estimate of sqrt(E[|Phi(xi) - xi|^2 + 2 |D Phi(xi) - I|_F^2]).

    ``phi_sampler`` maps a batch of standard normal vectors (trials, d) to
    ``(Phi(xi), D Phi(xi))``. Returns the estimate and its delta-method
    standard error.
    """
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    rng = np.random.default_rng(0) if rng is None else rng
    if dim is None:
        raise ValueError("dim is required")
    xi = rng.standard_normal((trials, dim))
    u, jac = phi_sampler(xi)
    g = np.sum((u - xi) ** 2, axis=-1) + 2.0 * np.sum((jac - np.eye(dim)) ** 2, axis=(-2, -1))
    mean = float(np.mean(g))
    est = math.sqrt(mean)
    se_mean = float(np.std(g, ddof=1)) / math.sqrt(trials)
    se = se_mean / (2 * est) if est > 0 else 0.0
    return est, se


# -- trajectory and velocity-map inequalities --------------------------------

def _grow(L, T, h):
    return 1 + L * (T**2 + T * h)


def apriori_position(xn, xTv, L, T, h):
    """Bound on max_s |q~_s(x, v)|; ``xTv`` is |x + T v|."""
    return _grow(L, T, h) * np.maximum(xn, xTv)


def apriori_velocity(xn, xTv, vn, L, T, h):
    return vn + L * T * _grow(L, T, h) * np.maximum(xn, xTv)


def apriori_difference(dx, dxTdv, L, T, h):
    """Bound on max_s |q~_s(x, u) - q~_s(y, v)| from |x - y| and |x - y + T (u - v)|."""
    return _grow(L, T, h) * np.maximum(dx, dxTdv)


def apriori_derivative_position(T):
    return 1.2 * T


def apriori_derivative_velocity():
    return 1.2


def apriori_derivative_difference(dx, dxTdv, L, L_H, T, h):
    return L_H * 1.2**2 * T**3 * _grow(L, T, h) * np.maximum(dx, dxTdv)


def trapezoid_defect_bound(h, T, B1, B2):
    return h**2 / 12.0 * (B2 * T**2 + B1 * T)


def strong_error_bound(h, T, L, L_H, xn, vn):
    """Bound on max_s |q_s(x, v) - q~_s(x, v)|."""
    return h**2 * (7 / 45 * L * xn + 1547 / 1800 * L * T * vn + 1 / 120 * L_H * xn**2 + 3 / 10 * L_H * T**2 * vn**2)


def derivative_error_bound(h, T, L, L_H, L_I, xn, vn):
    """Bound on max_s |D_2 q_s(x, v) - D_2 q~_s(x, v)|."""
    return h**2 * (43 / 50 * L * T + 1183 / 4500 * L_H * T * xn + 1847 / 1250 * L_H * T**2 * vn
                   + (3 / 250 * L_H**2 * T**3 + 1 / 100 * L_I * T) * xn**2
                   + (54 / 125 * L_H**2 * T**5 + 9 / 25 * L_I * T**3) * vn**2)


def same_endpoint_shift_bound(dx, T):
    """Bound on |Phi(v) - v| for the same-endpoint map (times T gives 3/2 |x - y|)."""
    return 1.5 * dx / T


def same_endpoint_jacobian_bound(dx, L_H, T):
    return 0.5 * np.minimum(1.0, 11.0 * L_H * T**2 * dx)


def same_endpoint_overlap_bound(dx, d, L_H, T):
    """Pointwise bound on sqrt(|Phi(v) - v|^2 + 2 |D Phi - I|_F^2)."""
    return np.sqrt(9 / 4 * T**-2 + 121 / 2 * d * L_H**2 * T**4) * dx


def exact_endpoint_shift_bound(h, T, L, L_H, xn, vn):
    """Bound on T |Phi(v) - v| for the exact-endpoint map."""
    return 7 / 6 * strong_error_bound(h, T, L, L_H, xn, vn)


def exact_endpoint_jacobian_bound(h, T, L, L_H, L_I, xn, vn):
    inner = h**2 * (43 / 45 * L + 1946 / 6075 * L_H * xn + 873707 / 486000 * L_H * T * vn
                    + (121 / 5400 * L_H**2 * T**2 + 1 / 90 * L_I) * xn**2
                    + (121 / 150 * L_H**2 * T**4 + 2 / 5 * L_I * T**2) * vn**2)
    return np.minimum(0.5, inner)


# mean-field analogues; sums run over particle blocks, constants are effective

def mf_apriori_position(sum_max_xTv, La, T, h):
    return _grow(La, T, h) * sum_max_xTv


def mf_apriori_velocity(sum_v, sum_max_xTv, La, T, h):
    return sum_v + La * T * _grow(La, T, h) * sum_max_xTv


def mf_apriori_difference(sum_max_diff, La, T, h):
    return _grow(La, T, h) * sum_max_diff


def mf_apriori_derivative_difference(sum_max_diff, La, Lb, T, h):
    return 42 / 25 * Lb * T**3 * _grow(La, T, h) * sum_max_diff


def mf_strong_error_bound(h, T, La, Lb, sx, sv, sx2, sv2):
    return h**2 * (La * sx + La * T * sv + Lb * sx2 + Lb * T * sv2)


def mf_derivative_error_bound(h, T, n, La, Lb, Lc, sx, sv, sx2, sv2):
    return h**2 * (La * T * n + Lb * T * sx + 2 * Lb * T**2 * sv
                   + (2 * Lb**2 * T**3 + Lc * T) * sx2 + (2 * Lb**2 * T**5 + Lc * T**3) * sv2)


def mf_same_endpoint_shift_bound(sum_dx, T):
    return 1.5 * sum_dx / T


def mf_same_endpoint_jacobian_bound(sum_dx, k, Lb, T):
    """Bound on |D Phi - I|_F for the mean-field same-endpoint map."""
    return 49 / 8 * math.sqrt(k) * Lb * T**2 * sum_dx


def mf_regularization_overlap_bound(sum_dx, k, Lb, T):
    return np.sqrt(9 / 4 * T**-2 + 2401 / 32 * k * Lb**2 * T**4) * sum_dx


def mf_exact_endpoint_shift_bound(h, T, La, Lb, sx, sv, sx2, sv2):
    """Bound on T sum_l |Phi^l(v) - v^l| for the exact-endpoint map."""
    return 72 / 65 * mf_strong_error_bound(h, T, La, Lb, sx, sv, sx2, sv2)


def mf_exact_endpoint_jacobian_bound(h, T, n, La, Lb, Lc, sx, sv, sx2, sv2):
    """Bound on T sum_{i,l} |d Phi^i / d v^l - delta_il I| for the exact-endpoint map."""
    return h**2 * (La * T * n + Lb * T * sx + 3 * Lb * T**2 * sv
                   + (Lc * T + 2 * Lb**2 * T**3) * sx2 + (Lc * T**3 + 3 * Lb**2 * T**5) * sv2)
