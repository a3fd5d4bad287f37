"""Unadjusted Hamiltonian Monte Carlo with velocity Verlet, one-shot couplings and TV bound evaluators."""

from .integrate import IntegratorParams, PhaseState, verlet_flow
from .kernel import ChainConfig, ThresholdPolicy, coupled_meeting_time, one_shot_step, synchronous_step, uhmc_run, uhmc_step
from .model import MeanFieldPotential, Potential, make_gaussian, mf_assemble
from .rng import Streams

__all__ = [
    "ChainConfig", "IntegratorParams", "MeanFieldPotential", "PhaseState", "Potential", "Streams",
    "ThresholdPolicy", "coupled_meeting_time", "make_gaussian", "mf_assemble", "one_shot_step",
    "synchronous_step", "uhmc_run", "uhmc_step", "verlet_flow",
]
__version__ = "0.1.0"
