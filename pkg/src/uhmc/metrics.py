"""Distances between laws: Gaussian oracles, empirical estimators and a quadrature KL."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import math

import numpy as np
from scipy import integrate, stats


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray  # (num, dim)
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class TVEstimate:
    value: float
    lower: float
    upper: float
    bins: int


def _normal_crossings(m1, s1, m2, s2):
    # roots of log p1 = log p2
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = m1 / s1**2 - m2 / s2**2
    c = 0.5 * m2**2 / s2**2 - 0.5 * m1**2 / s1**2 + np.log(s2 / s1)
    if abs(a) < 1e-15:
        return [] if abs(b) < 1e-15 else [-c / b]
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    r = np.sqrt(disc)
    return sorted([(-b - r) / (2 * a), (-b + r) / (2 * a)])


def tv_gaussian_1d(m1: float, s1: float, m2: float, s2: float) -> float:
    """TV(N(m1, s1^2), N(m2, s2^2)) by adaptive quadrature of |p1 - p2| / 2."""
    if not (s1 > 0 and s2 > 0):
        raise ValueError("scales must be positive")
    if m1 == m2 and s1 == s2:
        return 0.0
    c1, c2 = 1 / (s1 * math.sqrt(2 * math.pi)), 1 / (s2 * math.sqrt(2 * math.pi))

    def gap(z):
        return abs(c1 * math.exp(-0.5 * ((z - m1) / s1) ** 2) - c2 * math.exp(-0.5 * ((z - m2) / s2) ** 2))

    lo = min(m1 - 40 * s1, m2 - 40 * s2)
    hi = max(m1 + 40 * s1, m2 + 40 * s2)
    cuts = [lo] + [z for z in _normal_crossings(m1, s1, m2, s2) if lo < z < hi] + [hi]
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        val, _ = integrate.quad(gap, a, b,
                                epsabs=1e-13, epsrel=1e-12, limit=200)
        total += val
    return float(min(1.0, 0.5 * total))


def tv_isotropic_gaussians(s1: float, s2: float, d: int) -> float:
    """Exact TV(N(0, s1^2 I_d), N(0, s2^2 I_d)) via chi-square laws."""
    if s1 == s2:
        return 0.0
    lo, hi = sorted((s1, s2))
    r2 = 2 * d * np.log(hi / lo) / (1 / lo**2 - 1 / hi**2)
    return float(stats.chi2.cdf(r2 / lo**2, d) - stats.chi2.cdf(r2 / hi**2, d))


def tv_gaussian_shift(mahalanobis: float) -> float:
    """TV between two Gaussians with equal covariance, given the Mahalanobis distance of the means."""
    return float(2 * stats.norm.cdf(0.5 * abs(mahalanobis)) - 1)


def _histogram_edges(a: np.ndarray, b: np.ndarray, bins: int):
    both = np.concatenate([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return [np.linspace(lo[j], hi[j], bins + 1) for j in range(a.shape[1])]


def _binned_tv(a, b, edges, wa=None, wb=None):
    ha, _ = np.histogramdd(a, bins=edges, weights=wa)
    hb, _ = np.histogramdd(b, bins=edges, weights=wb)
    return 0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum()


def empirical_tv(a: SampleSet, b: SampleSet, bins: int = 64, bootstrap: int = 200,
                 seed: int = 0, edges=None) -> TVEstimate:
    """Histogram estimate of TV(a, b) with a 95% percentile bootstrap interval.

    Binning makes this a lower bound of the TV between the sampled laws, up
    to sampling noise. Histograms are meant for ``dim <= 3``.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if edges is None:
        edges = _histogram_edges(a.points, b.points, bins)
    value = _binned_tv(a.points, b.points, edges, a.weights, b.weights)
    rng = np.random.default_rng(seed)
    reps = np.empty(bootstrap)
    for i in range(bootstrap):
        ia = rng.integers(0, len(a), len(a))
        ib = rng.integers(0, len(b), len(b))
        reps[i] = _binned_tv(a.points[ia], b.points[ib], edges,
                             None if a.weights is None else a.weights[ia],
                             None if b.weights is None else b.weights[ib])
    lo, hi = np.percentile(reps, [2.5, 97.5]) if bootstrap else (value, value)
    return TVEstimate(float(value), float(lo), float(hi), int(len(edges[0]) - 1))


def w1_empirical_1d(a: SampleSet, b: SampleSet) -> float:
    """Exact W1 between 1-D empirical measures."""
    if a.dim != 1 or b.dim != 1:
        raise ValueError("w1_empirical_1d needs 1-D samples")
    if a.weights is None and b.weights is None and len(a) == len(b):
        return float(np.mean(np.abs(np.sort(a.points[:, 0]) - np.sort(b.points[:, 0]))))
    return float(stats.wasserstein_distance(a.points[:, 0], b.points[:, 0], a.weights, b.weights))


def block_norms(x, n: int, k: int):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n * k:
        raise ValueError("block mismatch")
    return np.linalg.norm(x.reshape(x.shape[:-1] + (n, k)), axis=-1)


def l1_block_distance(x, y, n: int, k: int):
    """Sum over particles of the Euclidean distance between blocks."""
    return np.sum(block_norms(np.asarray(x) - np.asarray(y), n, k), axis=-1)


def kl_phi_numeric(phi: Callable, d: int, nodes: int = 40) -> float:
    """KL of the Gaussian reference against its pull-back under ``phi``.

    Evaluates the expectation over v ~ N(0, I_d) of
    |Phi(v) - v|^2 / 2 + tr(D Phi(v) - I) - log |det D Phi(v)|
    with a tensor Gauss-Hermite rule. ``phi`` maps an array (num, d) to
    ``(Phi(v), D Phi(v))``.
    """
    if d not in (1, 2):
        raise ValueError("tensor quadrature supports d in {1, 2}")
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    v = np.stack([g.ravel() for g in grids], axis=-1)
    weight = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=-1)
    u, jac = phi(v)
    eye = np.eye(d)
    integrand = (0.5 * np.sum((u - v) ** 2, axis=-1) + np.trace(jac - eye, axis1=-2, axis2=-1)
                 - np.linalg.slogdet(jac)[1])
    kl = float(np.sum(weight * integrand))
    if kl < -1e-10:
        raise FloatingPointError(f"negative KL {kl}: quadrature failed")
    return max(kl, 0.0)
