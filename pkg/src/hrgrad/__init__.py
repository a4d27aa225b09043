"""Harmonized rotational gradient aggregation for multi-task optimization."""

from .aggregation import AggregationResult, FairDirection, fair_direction, hrgrad, restore_magnitudes
from .cone import HarmonizedCone, build_cone, extreme_rays
from .core import (
    ContractError,
    DegeneracyError,
    GradientSet,
    HRGradError,
    InvalidInputError,
    NumericTolerances,
    SizeLimitError,
    gram,
    normalize,
    pseudoinverse_rows_times_ones,
)
from .rotation import (
    MerConfig,
    RotationPlan,
    adaptive_steps,
    detect_conflicts,
    mer_objective,
    optimize_angles,
    rotate,
)

__version__ = "0.1.0"
