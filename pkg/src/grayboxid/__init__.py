"""Gray-box state-space parameter estimation.

A black-box realization from subspace identification is matched to an
affinely parametrized model by lifting the bilinear similarity equations to
a rank-constrained linear problem, initialized with nuclear-norm
regularization and refined by difference-of-convex programming.
"""
from .exceptions import (
    ConditioningWarning,
    ConfigError,
    DegenerateExtractionError,
    ExcitationError,
    GrayBoxError,
    IdentifiabilityWarning,
    NumericalFailure,
    OrderSelectionWarning,
    StabilityWarning,
    StructureError,
)
from .ssmodel import (
    ParametrizedStructure,
    SimData,
    StateSpace,
    add_noise,
    evaluate,
    fixtures,
    get_fixture,
    load_structure,
    simulate,
)
from .subspace import SubspaceConfig, canonical_realization, moesp
from .lifting import LiftedProblem, LiftedVariables, build_lifted, extract, objective_h
from .solvers import SolverConfig, SolveTrace, ami_solve, dcp_solve, nun_solve
from .harness import ExperimentPlan, identify, iteration_trace_experiment, rnmse, run_experiment
from .estimator import GrayBoxIdentifier

__version__ = "0.1.0"

__all__ = [
    "ConditioningWarning",
    "ConfigError",
    "DegenerateExtractionError",
    "ExcitationError",
    "GrayBoxError",
    "IdentifiabilityWarning",
    "NumericalFailure",
    "OrderSelectionWarning",
    "StabilityWarning",
    "StructureError",
    "ParametrizedStructure",
    "SimData",
    "StateSpace",
    "add_noise",
    "evaluate",
    "fixtures",
    "get_fixture",
    "load_structure",
    "simulate",
    "SubspaceConfig",
    "canonical_realization",
    "moesp",
    "LiftedProblem",
    "LiftedVariables",
    "build_lifted",
    "extract",
    "objective_h",
    "SolverConfig",
    "SolveTrace",
    "ami_solve",
    "dcp_solve",
    "nun_solve",
    "ExperimentPlan",
    "identify",
    "iteration_trace_experiment",
    "rnmse",
    "run_experiment",
    "GrayBoxIdentifier",
]
