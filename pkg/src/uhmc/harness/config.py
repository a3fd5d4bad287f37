"""Flat ``key = value`` experiment configuration with a typed schema."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ..integrate import IntegratorParams
from ..model import (MeanFieldPotential, Potential, make_cosine_interaction, make_double_well_tail_convex,
                     make_free, make_gaussian, mf_assemble)


class ConfigError(ValueError):
    pass


EXPERIMENTS = ("sample", "couple", "mixing_time", "bias_scan", "validate", "bounds")
MODELS = ("gaussian", "free", "cosine", "mean_field")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text: str):
        text = text.strip()
        return [kind(t) for t in text.replace(",", " ").split()] if text else []
    parse.__name__ = f"list[{kind.__name__}]"
    return parse


def _choice(*options):
    def parse(text: str):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.__name__ = "|".join(options)
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "experiment": Key(_choice(*EXPERIMENTS), "sample", "what to run"),
    "model": Key(_choice(*MODELS), "gaussian", "target family"),
    "dim": Key(int, 1, "dimension (gaussian, free, cosine)"),
    "omega2": Key(_list(float), [1.0], "gaussian precisions; one value is broadcast"),
    "a": Key(float, 0.5, "cosine amplitude, |a| < 1"),
    "mf_n": Key(int, 2, "mean-field particle count"),
    "mf_k": Key(int, 1, "mean-field particle dimension"),
    "mf_eps": Key(float, 0.0, "mean-field interaction strength"),
    "mf_confinement": Key(_choice("gaussian", "cosine"), "gaussian", "mean-field confinement V"),
    "mf_interaction": Key(_choice("gaussian", "cosine"), "cosine", "mean-field pair interaction W"),
    "mf_a": Key(float, 0.3, "cosine amplitude of the mean-field confinement"),
    "T": Key(float, 0.35, "duration of one transition"),
    "N": Key(int, 8, "Verlet steps per transition (h = T / N)"),
    "allow_unconstrained": Key(_bool, False, "run even if L (T^2 + T h) > 1/6"),
    "replicas": Key(int, 1000, "independent replicas"),
    "steps": Key(int, 100, "transitions per replica (sample)"),
    "burn_in": Key(int, 200, "transitions used to draw stationary starts for non-Gaussian models"),
    "seed": Key(int, 0, "64-bit seed"),
    "out": Key(str, "out", "output directory"),
    "x0": Key(_list(float), [0.0], "first chain start; one value is broadcast"),
    "y0": Key(_list(float), [2.0], "second chain start (couple); one value is broadcast"),
    "start": Key(_choice("point", "stationary"), "point", "mixing_time: first chain from x0 or a stationary draw"),
    "threshold": Key(float, 0.0, "one-shot distance threshold; 0 selects the default policy"),
    "max_consecutive": Key(int, 5, "one-shot attempts in a row before a synchronous step"),
    "max_steps": Key(int, 10_000, "cap on coupled transitions"),
    "eps_tv": Key(float, 0.05, "target TV accuracy for mixing times"),
    "dims": Key(_list(int), [1, 4, 16, 64], "dimensions for mixing_time and bias_scan"),
    "N_list": Key(_list(int), [8, 16, 32, 64], "step counts for bias_scan"),
    "draws": Key(int, 10_000, "random inputs per inequality (validate)"),
    "M2": Key(float, 0.0, "bound on W1(mu, mu~) / h^2; 0 derives it for Gaussian targets"),
    "w1_init": Key(float, 0.0, "W1 distance of the start to the invariant law; 0 derives it"),
}


def print_schema() -> str:
    lines = []
    for name, key in SCHEMA.items():
        default = " ".join(map(str, key.default)) if isinstance(key.default, list) else key.default
        lines.append(f"{name} = {default}    # {key.parse.__name__}: {key.help}")
    return "\n".join(lines) + "\n"


class ExperimentConfig(dict):
    """Validated configuration; ``h`` is always recomputed from ``T`` and ``N``."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def params(self) -> IntegratorParams:
        return IntegratorParams(self["T"], self["N"])

    @property
    def h(self) -> float:
        return self["T"] / self["N"]

    def echo(self) -> dict:
        return {k: self[k] for k in SCHEMA}


def parse_config(text: str = "", overrides: dict | None = None) -> ExperimentConfig:
    values = {k: key.default for k, key in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        name, value = (s.strip() for s in line.split("=", 1))
        if name == "h":
            raise ConfigError(f"line {lineno}: h is derived from T and N and cannot be set")
        if name not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        try:
            values[name] = SCHEMA[name].parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {name}: {exc}") from None
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value
    _validate(values)
    return ExperimentConfig(values)


def _validate(v: dict):
    positive = ["dim", "mf_n", "mf_k", "N", "replicas", "max_consecutive", "max_steps", "draws"]
    for name in positive:
        if v[name] < 1:
            raise ConfigError(f"{name} must be >= 1")
    if v["steps"] < 0 or v["burn_in"] < 0:
        raise ConfigError("steps and burn_in must be >= 0")
    if not v["T"] > 0:
        raise ConfigError("T must be positive")
    if not 0 < v["eps_tv"] < 1:
        raise ConfigError("eps_tv must lie in (0, 1)")
    if not (0 <= v["seed"] < 2**64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if not v["omega2"] or min(v["omega2"]) <= 0:
        raise ConfigError("omega2 must be positive")
    if v["model"] == "cosine" and abs(v["a"]) >= 1:
        raise ConfigError("cosine model needs |a| < 1")
    if v["threshold"] < 0 or v["M2"] < 0 or v["w1_init"] < 0:
        raise ConfigError("threshold, M2 and w1_init must be nonnegative")
    if not v["dims"] or min(v["dims"]) < 1 or not v["N_list"] or min(v["N_list"]) < 1:
        raise ConfigError("dims and N_list must be nonempty lists of positive integers")


def build_potential(cfg: ExperimentConfig, dim: int | None = None) -> Potential:
    d = cfg["dim"] if dim is None else dim
    model = cfg["model"]
    try:
        if model == "gaussian":
            om = cfg["omega2"]
            if len(om) not in (1, d):
                raise ConfigError(f"omega2 needs 1 or {d} values")
            return make_gaussian(d, om[0] if len(om) == 1 else om)
        if model == "free":
            return make_free(d)
        if model == "cosine":
            return make_double_well_tail_convex(d, cfg["a"])
        k = cfg["mf_k"]
        V = make_gaussian(k, 1.0) if cfg["mf_confinement"] == "gaussian" else make_double_well_tail_convex(k, cfg["mf_a"])
        W = make_gaussian(k, 1.0) if cfg["mf_interaction"] == "gaussian" else make_cosine_interaction(k)
        return mf_assemble(MeanFieldPotential(cfg["mf_n"], k, V, W, cfg["mf_eps"]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def start_point(values: list, dim: int, name: str) -> np.ndarray:
    if len(values) == 1:
        return np.full(dim, values[0])
    if len(values) != dim:
        raise ConfigError(f"{name} needs 1 or {dim} values")
    return np.asarray(values, dtype=float)
