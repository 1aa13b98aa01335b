"""Maximum-likelihood identification of networks of ARMAX nodes from partial measurements."""

from .dataset import Dataset
from .errors import (
    AssumptionError,
    ConditioningError,
    ConvergenceError,
    DegenerateSampleError,
    EstimationError,
    GenerationError,
    NetidentError,
    SingularityError,
    StabilityError,
    StructureError,
)
from .estimator import EstimateResult, EstimatorConfig, estimate, trust_region_minimize
from .likelihood import nll_stationary, nll_time_varying
from .model import (
    ArmaxNode,
    NetworkModel,
    Topology,
    assemble_closed_loop,
    fig1_topology,
    validate_model,
)
from .riccati import kalman_stationary, kalman_time_varying, solve_dare
from .toeplitz import nll_reduced

__all__ = [
    "ArmaxNode",
    "AssumptionError",
    "ConditioningError",
    "ConvergenceError",
    "Dataset",
    "DegenerateSampleError",
    "EstimateResult",
    "EstimationError",
    "EstimatorConfig",
    "GenerationError",
    "NetidentError",
    "NetworkModel",
    "SingularityError",
    "StabilityError",
    "StructureError",
    "Topology",
    "assemble_closed_loop",
    "estimate",
    "fig1_topology",
    "kalman_stationary",
    "kalman_time_varying",
    "nll_reduced",
    "nll_stationary",
    "nll_time_varying",
    "solve_dare",
    "trust_region_minimize",
    "validate_model",
]

__version__ = "0.1.0"
