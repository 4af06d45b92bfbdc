"""Longitudinal screening-CT survival modeling on synthetic cohorts."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DegenerateWeightError,
                     NumericError, PipelineError, StateError,
                     UndefinedLossError, UndefinedMetricError)

__all__ = [
    "ConfigurationError", "DataError", "DegenerateWeightError", "NumericError",
    "PipelineError", "StateError", "UndefinedLossError", "UndefinedMetricError",
    "__version__",
]
