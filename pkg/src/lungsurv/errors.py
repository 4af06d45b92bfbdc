"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad shapes, dimensions, rates, or option values."""


class StateError(RuntimeError):
    """Operation called in the wrong order, e.g. backward before forward."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataError(ValueError):
    """Problem with a cohort, fixture, split, or other data artifact."""


class UndefinedMetricError(DataError):
    """A metric has no defined value on this input (single class, no pairs...)."""


class UndefinedLossError(DataError):
    """A loss has no defined value on this batch (e.g. no events for Cox)."""


class DegenerateWeightError(DataError):
    """An IPCW weight would divide by a zero censoring-survival probability."""


class PipelineError(DataError):
    """Preprocessing pipeline failed; carries the name of the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
