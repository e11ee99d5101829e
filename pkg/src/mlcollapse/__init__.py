"""Spectral-control laboratory for multi-label neural collapse.

Count tables, the centered label covariance spectrum, the PAL affine bound,
the distribution-dependent lower bound on the regularized UFM objective,
a deterministic UFM optimizer and structural diagnostics of its minimizers.
"""

from .errors import (
    CollapseError,
    ConfigError,
    DegenerateDistributionError,
    MatrixError,
    NumericError,
    SpectralDegeneracyError,
    UnknownMultiplicityError,
)
from .label_space import LabelDistribution, class_counts, group_total, scenario, worst_set_term

__version__ = "0.1.0"

__all__ = [
    "CollapseError",
    "ConfigError",
    "DegenerateDistributionError",
    "LabelDistribution",
    "MatrixError",
    "NumericError",
    "SpectralDegeneracyError",
    "UnknownMultiplicityError",
    "class_counts",
    "group_total",
    "scenario",
    "worst_set_term",
]
