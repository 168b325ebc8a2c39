"""Voting transitions from polling-station margins."""

from .estimation import FitError, FitOptions, FitResult, average_transition_matrix, fit
from .model import (
    CovariateDesign,
    Dataset,
    IdentifiabilityError,
    ModelError,
    ParameterVector,
    StationRecord,
    logits_to_probs,
    probs_to_logits,
    row_variance,
    station_moments,
    station_probs,
)
from .reconstruction import expected_cells_ipf, goodman_fit
from .simulation import ScenarioConfig, run_mc_study, scenario, simulate

__all__ = [
    "CovariateDesign", "Dataset", "FitError", "FitOptions", "FitResult", "IdentifiabilityError",
    "ModelError", "ParameterVector", "ScenarioConfig", "StationRecord", "average_transition_matrix",
    "expected_cells_ipf", "fit", "goodman_fit", "logits_to_probs", "probs_to_logits", "row_variance",
    "run_mc_study", "scenario", "simulate", "station_moments", "station_probs",
]
