"""Moments, simulation and parameter inference for networks of infinite-server queues."""

__version__ = "0.1.0"

from .estimator import EstimationResult, SolverOptions, estimate, identify_closed_form
from .model import (
    Deterministic,
    Erlang,
    EstimationMode,
    Exponential,
    ModelFree,
    NetworkParams,
    ProjectionConfig,
    validate,
)
from .moments import MomentSet, observed_moments
from .simulator import ObservationLog, replicate, simulate

__all__ = [
    "Deterministic",
    "Erlang",
    "EstimationMode",
    "EstimationResult",
    "Exponential",
    "ModelFree",
    "MomentSet",
    "NetworkParams",
    "ObservationLog",
    "ProjectionConfig",
    "SolverOptions",
    "estimate",
    "identify_closed_form",
    "observed_moments",
    "replicate",
    "simulate",
    "validate",
]
