"""Continuous-time Bayesian network learning from partially observed data.

Exact inference over the flattened joint Markov process drives EM for
parameters, structural EM with a BIC score for the parent graph, and
phase-type (non-exponential) state-duration models.
"""

from .markov import (
    CompleteTrajectory,
    IntensityMatrix,
    matrix_exponential,
    sample_trajectories,
    sample_trajectory,
    transient_distribution,
    validate_distribution,
    validate_intensity,
)
from .evidence import (
    Evidence,
    ObservedTrajectory,
    OcclusionPolicy,
    Subsystem,
    is_completion,
    occlude,
    occlude_observed,
    restrict_intensity,
    transition_restrict,
)
from .inference import (
    FlatStatistics,
    MessageCache,
    StepUnderflowError,
    ZeroProbabilityEvidenceError,
    convolution_integrals,
    expected_dwell,
    expected_statistics,
    expected_transitions,
    forward_backward,
    smoothed_marginal,
)
from .model import (
    Cim,
    CtbnModel,
    FamilyStatistics,
    IncompatibleSupportError,
    JointSpaceTooLargeError,
    Variable,
    aggregate_statistics,
    amalgamate,
    count_parameters,
    family_log_likelihood,
)
from .learning import (
    EmConfig,
    FitResult,
    FlatFamilyProvider,
    SemConfig,
    bic_score,
    e_step,
    em,
    m_step,
    random_parameters,
    score_dataset,
    sem,
    structure_search,
)
from .phase import (
    InconsistentPhaseCountsError,
    PhaseDistribution,
    PhaseSpec,
    SingularTransientMatrixError,
    erlang,
    expand_phases,
    hidden_parent_to_phase,
    phase_density,
    phase_mean,
)
from .statespace import StateSpace
from .estimators import CtbnEmEstimator, CtbnSemEstimator

__version__ = "0.1.0"

__all__ = [
    "CompleteTrajectory",
    "IntensityMatrix",
    "matrix_exponential",
    "sample_trajectories",
    "sample_trajectory",
    "transient_distribution",
    "validate_distribution",
    "validate_intensity",
    "Evidence",
    "ObservedTrajectory",
    "OcclusionPolicy",
    "Subsystem",
    "is_completion",
    "occlude",
    "occlude_observed",
    "restrict_intensity",
    "transition_restrict",
    "FlatStatistics",
    "MessageCache",
    "StepUnderflowError",
    "ZeroProbabilityEvidenceError",
    "convolution_integrals",
    "expected_dwell",
    "expected_statistics",
    "expected_transitions",
    "forward_backward",
    "smoothed_marginal",
    "Cim",
    "CtbnModel",
    "FamilyStatistics",
    "IncompatibleSupportError",
    "JointSpaceTooLargeError",
    "Variable",
    "aggregate_statistics",
    "amalgamate",
    "count_parameters",
    "family_log_likelihood",
    "EmConfig",
    "FitResult",
    "FlatFamilyProvider",
    "SemConfig",
    "bic_score",
    "e_step",
    "em",
    "m_step",
    "random_parameters",
    "score_dataset",
    "sem",
    "structure_search",
    "InconsistentPhaseCountsError",
    "PhaseDistribution",
    "PhaseSpec",
    "SingularTransientMatrixError",
    "erlang",
    "expand_phases",
    "hidden_parent_to_phase",
    "phase_density",
    "phase_mean",
    "StateSpace",
    "CtbnEmEstimator",
    "CtbnSemEstimator",
]
