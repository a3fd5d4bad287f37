"""Experiment drivers behind the CLI.

Each driver returns a :class:`RunReport` whose ``tables`` become CSV files and
whose remaining fields become a JSON summary. Outputs depend only on the
configuration and seed: replicas are sharded by id, each shard draws from its
own counter-based streams, and results are reassembled in id order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from .. import bounds as B
from ..kernel import NOT_MET, ChainConfig, GradientCounter, ThresholdPolicy, coupled_meeting_time, model_distance, uhmc_run
from ..metrics import tv_isotropic_gaussians
from ..model import Potential, TargetMoments, gaussian_moments, make_gaussian, monte_carlo_moments
from ..rng import TAG_VELOCITY, Streams
from .config import ConfigError, ExperimentConfig, build_potential, start_point
from .validation import run_suite

# counter step word reserved for drawing initial states
INIT_STEP = 0xFFFFFFFF


@dataclass
class RunReport:
    experiment: str
    config: dict
    summary: dict = field(default_factory=dict)
    per_replica: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    gradient_evals: int = 0
    wall_clock: float = 0.0
    failed_checks: int = 0
    bounds: Optional[list] = None  # BoundReports for the bounds experiment

    def to_dict(self) -> dict:
        # wall-clock time is kept out so repeated runs give identical bytes
        return {"experiment": self.experiment, "config": self.config, "summary": self.summary,
                "per_replica": self.per_replica, "gradient_evals": self.gradient_evals,
                "failed_checks": self.failed_checks}


def sharded(run: Callable[[np.ndarray], dict], replicas: int, threads: int) -> dict:
    """Run ``run(ids)`` over contiguous replica-id shards and concatenate the arrays in id order."""
    ids = np.arange(replicas, dtype=np.uint64)
    shards = np.array_split(ids, max(1, min(threads, replicas)))
    if len(shards) == 1:
        parts = [run(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(run, shards))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def linear_fit(x, y) -> dict:
    res = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return {"slope": float(res.slope), "intercept": float(res.intercept), "r2": float(res.rvalue**2)}


def survival_curve(tau: np.ndarray, min_count: int = 10):
    """(m, P[tau > m]) from the smallest meeting time to the last m with >= min_count survivors."""
    met = tau[tau != NOT_MET]
    if met.size == 0:
        return np.array([]), np.array([])
    survivors = lambda m: np.count_nonzero((tau > m) | (tau == NOT_MET))
    m = np.arange(int(met.min()), int(met.max()) + 1)
    counts = np.array([survivors(k) for k in m])
    keep = counts >= min_count
    return m[keep], counts[keep] / tau.size


def survival_fit(tau: np.ndarray, min_count: int = 10) -> dict:
    m, surv = survival_curve(tau, min_count)
    if m.size < 3:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "points": int(m.size)}
    return {**linear_fit(m, np.log(surv)), "points": int(m.size)}


def verlet_ar1(omega2: float, p) -> tuple[float, float]:
    """(A, B) with X' = A X + B xi for the one-dimensional Gaussian chain."""
    h = p.h
    M = np.array([[1 - h * h * omega2 / 2, h], [-h * omega2 + h**3 * omega2**2 / 4, 1 - h * h * omega2 / 2]])
    A, Bc = np.linalg.matrix_power(M, p.N)[0]
    return float(A), float(Bc)


def stationary_scales(U: Potential, p) -> Optional[np.ndarray]:
    """Per-coordinate standard deviations of the chain's invariant law for diagonal Gaussians."""
    if U.quadratic is None or U.mean_field is not None:
        return None
    A = np.asarray(U.quadratic)
    if np.count_nonzero(A - np.diag(np.diag(A))):
        return None
    out = []
    for w2 in np.diag(A):
        a, b = verlet_ar1(float(w2), p)
        if abs(a) >= 1:
            raise FloatingPointError("Gaussian chain is not stable at this step size")
        out.append(abs(b) / math.sqrt(1 - a * a))
    return np.array(out)


def mean_norm(d: int) -> float:
    """E|Z| for Z ~ N(0, I_d)."""
    return math.sqrt(2) * math.exp(special.gammaln((d + 1) / 2) - special.gammaln(d / 2))


def _stationary_draws(U: Potential, cfg: ExperimentConfig, ids: np.ndarray, x_start) -> np.ndarray:
    """Starts drawn from the chain's invariant law: exact for diagonal Gaussians, burn-in otherwise."""
    p = cfg.params
    scales = stationary_scales(U, p)
    streams = Streams(cfg["seed"], ids)
    if scales is not None:
        return scales * streams.normal(INIT_STEP, TAG_VELOCITY + 7, (U.dim,))
    chain = ChainConfig(U, p, cfg["seed"] ^ 0x9E3779B97F4A7C15, allow_unconstrained=cfg["allow_unconstrained"])
    burn = Streams(chain.seed, ids)
    return uhmc_run(x_start, cfg["burn_in"], chain, burn)[-1]


def _chain(U: Potential, cfg: ExperimentConfig) -> ChainConfig:
    try:
        return ChainConfig(U, cfg.params, cfg["seed"], allow_unconstrained=cfg["allow_unconstrained"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _policy(U: Potential, cfg: ExperimentConfig) -> ThresholdPolicy:
    kw = {"max_consecutive": cfg["max_consecutive"], "max_steps": cfg["max_steps"]}
    if cfg["threshold"] > 0:
        return ThresholdPolicy(cfg["threshold"], **kw)
    return ThresholdPolicy.default(U, cfg.params, **kw)


def _mean_se(values: np.ndarray) -> dict:
    values = np.asarray(values, float)
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
    return {"mean": float(values.mean()), "se": se}


# -- experiments ---------------------------------------------------------------

def run_sample(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    counter = GradientCounter(build_potential(cfg))
    U = counter.potential
    chain = _chain(U, cfg)
    x0 = start_point(cfg["x0"], U.dim, "x0")
    steps = cfg["steps"]

    def work(ids):
        states = uhmc_run(x0, steps, chain, Streams(cfg["seed"], ids))
        sq = np.stack([np.sum(s**2, axis=-1) for s in states], axis=1)  # (replicas, steps + 1)
        return {"final": states[-1], "sq": sq}

    out = sharded(work, cfg["replicas"], threads)
    final, sq = out["final"], out["sq"]
    se = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0]) if sq.shape[0] > 1 else np.full(sq.shape[1], np.nan)
    trace = [[m, float(a), float(b)] for m, (a, b) in enumerate(zip(sq.mean(axis=0), se))]
    coords = [f"x{j + 1}" for j in range(U.dim)]
    states = [[i, *map(float, row)] for i, row in enumerate(final)]
    summary = {
        "final_mean": final.mean(axis=0).tolist(),
        "final_var": final.var(axis=0, ddof=1).tolist() if final.shape[0] > 1 else None,
        "final_sq_norm": _mean_se(np.sum(final**2, axis=-1)),
        "expected_gradient_evals": cfg["replicas"] * steps * (cfg["N"] + 1),
    }
    scales = stationary_scales(U, cfg.params)
    if scales is not None:
        summary["stationary_var_exact"] = (scales**2).tolist()
    return RunReport("sample", cfg.echo(), summary,
                     per_replica=[{"replica_id": i, "final_sq_norm": float(s)} for i, s in enumerate(sq[:, -1])],
                     tables={"sample_trace": (["step", "mean_sq_norm", "se"], trace),
                             "sample_states": (["replica_id", *coords], states)},
                     gradient_evals=counter.count)


def run_couple(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    counter = GradientCounter(build_potential(cfg))
    U = counter.potential
    chain = _chain(U, cfg)
    policy = _policy(U, cfg)
    x0, y0 = start_point(cfg["x0"], U.dim, "x0"), start_point(cfg["y0"], U.dim, "y0")

    def work(ids):
        rec = coupled_meeting_time(x0, y0, chain, Streams(cfg["seed"], ids), policy)
        return {"tau": rec.tau, "phase1": rec.phase1_steps, "attempts": rec.oneshot_attempts}

    out = sharded(work, cfg["replicas"], threads)
    tau = out["tau"]
    met = tau != NOT_MET
    rows = [[i, int(t), int(a), int(b)] for i, (t, a, b) in enumerate(zip(tau, out["phase1"], out["attempts"]))]
    m, surv = survival_curve(tau)
    summary = {
        "threshold": policy.threshold,
        "met_fraction": float(met.mean()),
        "tau": _mean_se(tau[met]) if met.any() else None,
        "oneshot_attempts": _mean_se(out["attempts"]),
        "survival_fit": survival_fit(tau),
        "heuristic": U.convexity is None or U.convexity.R > 0,
    }
    return RunReport("couple", cfg.echo(), summary,
                     per_replica=[{"replica_id": r[0], "tau": r[1], "phase1_steps": r[2], "oneshot_attempts": r[3]}
                                  for r in rows],
                     tables={"couple": (["replica_id", "tau", "phase1_steps", "oneshot_attempts"], rows),
                             "couple_survival": (["m", "survival"], [[int(a), float(b)] for a, b in zip(m, surv)])},
                     gradient_evals=counter.count)


def _rate_certificate(U: Potential, p) -> Optional[B.RateCertificate]:
    mf = U.mean_field
    if mf is not None:
        conv = mf.V.convexity
        if conv is None:
            return None
        return B.mean_field_rates(conv.K, mf.L, conv.R, p.T, p.h, mf.eps, mf.Lt, mf.n)
    if U.convexity is None:
        return None
    return B.logconcave_rates(U.convexity.K, U.L, U.convexity.R, p.T, p.h)


def run_mixing_time(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    """Coupling estimate of the eps-mixing time from x0, for each dimension in ``dims``."""
    eps = cfg["eps_tv"]
    rows, table, summary_d = [], [], {}
    total = 0
    for d in cfg["dims"]:
        counter = GradientCounter(build_potential(cfg, dim=d))
        U = counter.potential
        chain = _chain(U, cfg)
        policy = _policy(U, cfg)
        cert = _rate_certificate(U, cfg.params)
        if cert is None:
            raise ConfigError("mixing_time needs a model with a rate certificate")
        x_point = start_point(cfg["x0"], d, "x0")

        def work(ids):
            y = _stationary_draws(U, cfg, ids, x_point)
            if cfg["start"] == "stationary":
                x = _stationary_draws(U, cfg, ids + np.uint64(cfg["replicas"]), x_point)
            else:
                x = np.broadcast_to(x_point, y.shape)
            rec = coupled_meeting_time(x, y, chain, Streams(cfg["seed"], ids), policy)
            return {"tau": rec.tau, "dist0": model_distance(U, x, y)}

        out = sharded(work, cfg["replicas"], threads)
        tau = out["tau"]
        capped = tau == NOT_MET
        horizon = int(tau.max()) if not capped.all() else 0
        tmix = None
        for m in range(horizon + 1):
            not_met = float(np.mean((tau > m) | capped))
            table.append([d, m, 1.0 - not_met, not_met])
            if tmix is None and not_met <= eps:
                tmix = m
        scales = stationary_scales(U, cfg.params)
        if cfg["w1_init"] > 0:
            w1, w1_src = cfg["w1_init"], "config"
        elif scales is not None and cfg["start"] == "point" and not np.any(x_point) and np.ptp(scales) == 0:
            w1, w1_src = float(scales[0]) * mean_norm(d), "exact"
        else:
            w1, w1_src = float(np.mean(out["dist0"])), "monte_carlo"
        pref = None
        if U.mean_field is not None:
            pref = B.mean_field_regularization_constant(cfg["T"], U.mean_field.k, U.mean_field.effective_constants[1])
        bound = B.mixing_time_bound(eps, cert, w1, cfg["T"], d, U.L_H, prefactor=pref)
        summary_d[str(d)] = {
            "t_mix": tmix, "bound": bound, "bound_valid": cert.valid, "rate_c": cert.c, "w1_init": w1,
            "w1_source": w1_src, "capped": int(capped.sum()), "max_tau": int(tau[~capped].max()) if (~capped).any() else None,
            "all_met_before_bound": bool(not capped.any() and tau.max() <= bound),
            "t_mix_below_bound": bool(tmix is not None and tmix <= bound),
        }
        rows.append({"d": d, "t_mix": tmix, "bound": bound})
        total += counter.count
    fit = None
    good = [r for r in rows if r["t_mix"] is not None]
    if len(good) >= 3:
        fit = linear_fit([math.log(r["d"]) for r in good], [r["t_mix"] for r in good])
    summary = {"per_dim": summary_d, "log_d_fit": fit, "eps_tv": eps}
    failed = sum(1 for s in summary_d.values() if not s["t_mix_below_bound"])
    return RunReport("mixing_time", cfg.echo(), summary, per_replica=[],
                     tables={"mixing_time": (["d", "m", "meet_fraction", "tv_upper"], table)},
                     gradient_evals=total, failed_checks=failed)


def bias_point(d: int, omega2: float, T: float, N: int) -> dict:
    """Exact TV(mu, mu~) for an isotropic Gaussian target and the strong-error bound at (d, h)."""
    from ..integrate import IntegratorParams

    p = IntegratorParams(T, N)
    a, b = verlet_ar1(omega2, p)
    sigma, sigma_t = 1 / math.sqrt(omega2), abs(b) / math.sqrt(1 - a * a)
    tv = tv_isotropic_gaussians(sigma, sigma_t, d)
    U = make_gaussian(d, omega2)
    M2 = abs(sigma - sigma_t) * mean_norm(d) / p.h**2
    C = B.bias_constant_C(d, T, U.L, 0.0, 0.0, gaussian_moments(U))
    return {"d": d, "N": N, "h": p.h, "tv_exact": tv, "thm_bound": B.tv_bias_bound(p.h, T, d, 0.0, M2, C),
            "sigma_mu_tilde": sigma_t, "M2": M2}


def run_bias_scan(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    if cfg["model"] != "gaussian" or len(cfg["omega2"]) != 1:
        raise ConfigError("bias_scan needs an isotropic gaussian model (a single omega2 value)")
    w2, T = cfg["omega2"][0], cfg["T"]
    points = [bias_point(d, w2, T, N) for d in cfg["dims"] for N in cfg["N_list"]]
    d0, N0 = cfg["dims"][0], cfg["N_list"][0]
    by_h = [pt for pt in points if pt["d"] == d0]
    by_d = [pt for pt in points if pt["N"] == N0]
    fit_h = linear_fit(np.log([pt["h"] for pt in by_h]), np.log([pt["tv_exact"] for pt in by_h])) if len(by_h) > 1 else None
    fit_d = linear_fit(np.log([pt["d"] for pt in by_d]), np.log([pt["tv_exact"] for pt in by_d])) if len(by_d) > 1 else None
    below = all(pt["tv_exact"] <= pt["thm_bound"] for pt in points)
    rows = [[pt["d"], pt["N"], pt["h"], pt["tv_exact"], pt["thm_bound"]] for pt in points]
    summary = {"h_fit": fit_h, "d_fit": fit_d, "fit_h_at_d": d0, "fit_d_at_N": N0, "all_below_bound": below}
    return RunReport("bias_scan", cfg.echo(), summary,
                     tables={"bias_scan": (["d", "N", "h", "tv_exact", "thm_bound"], rows)},
                     failed_checks=0 if below else 1)


def run_validation(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    U = build_potential(cfg)
    tallies = run_suite(U, cfg.params, draws=cfg["draws"], seed=cfg["seed"])
    rows = [[t.name, t.checked, t.violations, int(t.skipped), t.worst_ratio] for t in tallies]
    summary = {
        "passed": sum(t.passed for t in tallies),
        "failed": sum(t.violations > 0 for t in tallies),
        "skipped": sum(t.skipped for t in tallies),
        "lemmas": [t.summary() for t in tallies],
        "counterexamples": {t.name: t.counterexamples for t in tallies if t.counterexamples},
        "constraint_value": cfg.params.constraint_value(U.L),
    }
    return RunReport("validate", cfg.echo(), summary,
                     tables={"validate": (["lemma", "checked", "violations", "skipped", "worst_ratio"], rows)},
                     failed_checks=summary["failed"])


def _moments(U: Potential, cfg: ExperimentConfig) -> TargetMoments:
    if U.quadratic is not None:
        return gaussian_moments(U)
    # long-run uHMC samples stand in for the target; inflated to stay on the safe side
    chain = _chain(U, cfg)
    x0 = np.zeros(U.dim)
    states = uhmc_run(x0, cfg["burn_in"] + cfg["steps"], chain, chain.streams(np.arange(cfg["replicas"])))
    samples = np.concatenate(states[cfg["burn_in"] + 1:], axis=0)
    n = U.mean_field.n if U.mean_field is not None else None
    return monte_carlo_moments(samples, n=n)


def _gaussian_M2(U: Potential, p) -> Optional[float]:
    """Upper bound on W1(mu, mu~) / h^2 via W2 of commuting Gaussians; exact W1 when isotropic."""
    scales = stationary_scales(U, p)
    if scales is None:
        return None
    target = 1 / np.sqrt(np.diag(np.asarray(U.quadratic)))
    if np.ptp(scales) == 0 and np.ptp(target) == 0:
        w1 = abs(target[0] - scales[0]) * mean_norm(U.dim)
    else:
        w1 = float(np.linalg.norm(target - scales))
    return w1 / p.h**2


def run_bounds(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    U = build_potential(cfg)
    p = cfg.params
    moments = _moments(U, cfg)
    cert = _rate_certificate(U, p)
    w1 = cfg["w1_init"] or None
    M2 = cfg["M2"] or _gaussian_M2(U, p)
    reports = []
    if U.mean_field is not None:
        reports += B.mean_field_bounds(U.mean_field, p.T, p.h, moments, cert, w1, cfg["eps_tv"], M2)
    reports += B.general_bounds(U, p.T, p.h, moments, cert, w1, cfg["eps_tv"], M2)
    summary = {r.name: r.value for r in reports}
    return RunReport("bounds", cfg.echo(), summary, bounds=reports)


RUNNERS = {
    "sample": run_sample,
    "couple": run_couple,
    "mixing_time": run_mixing_time,
    "bias_scan": run_bias_scan,
    "validate": run_validation,
    "bounds": run_bounds,
}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    start = time.perf_counter()
    report = RUNNERS[cfg["experiment"]](cfg, threads)
    report.wall_clock = time.perf_counter() - start
    return report
