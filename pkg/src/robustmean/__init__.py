"""Robust high-dimensional mean estimation via a primal/dual SDP refinement loop."""

from .baseline import coordinatewise_median, empirical_mean, prune
from .contamination import (AdversaryKind, AdversarySpec, DistributionKind, GeneratorSpec,
                            check_conditions, generate, load_dataset, save_dataset)
from .estimator import EstimatorConfig, estimate_bounded_cov, estimate_subgaussian
from .model import (ConstantSchedule, EstimationReport, GroundTruth, Regime, RobustMeanError,
                    SampleSet, TerminalCase, WeightVector, build_constants, weighted_mean)

__all__ = [
    "AdversaryKind", "AdversarySpec", "ConstantSchedule", "DistributionKind", "EstimationReport",
    "EstimatorConfig", "GeneratorSpec", "GroundTruth", "Regime", "RobustMeanError", "SampleSet",
    "TerminalCase", "WeightVector", "build_constants", "check_conditions", "coordinatewise_median",
    "empirical_mean", "estimate_bounded_cov", "estimate_subgaussian", "generate", "load_dataset",
    "prune", "save_dataset", "weighted_mean",
]
