"""Maximum-likelihood tomography of two-cavity photon states."""

from cavitomo.channels import ExperimentParams, Outcome
from cavitomo.effects import MeasurementRecord, compile_effects
from cavitomo.fockspace import SpaceConfig
from cavitomo.mle import reconstruct
from cavitomo.precision import element_error_bars, fidelity
from cavitomo.simulator import make_truth_state, simulate_batch

__all__ = [
    "ExperimentParams",
    "MeasurementRecord",
    "Outcome",
    "SpaceConfig",
    "compile_effects",
    "element_error_bars",
    "fidelity",
    "make_truth_state",
    "reconstruct",
    "simulate_batch",
]
__version__ = "0.1.0"
