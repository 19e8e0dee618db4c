"""Exception hierarchy shared by every tasam module."""


class TasamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TasamError):
    """Operand shapes are incompatible; the message names both shapes."""


class ConfigError(TasamError):
    """A configuration value is invalid (divisibility, missing key, ...)."""


class ContractError(TasamError):
    """An API precondition was violated (non-scalar loss, missing native grid)."""


class DataError(TasamError):
    """Input data is invalid (label ids out of range, shape mismatch)."""


class FormatError(TasamError):
    """A serialized file (TSR1 tensor, TSMC checkpoint) failed to parse."""


class DatasetError(TasamError):
    """A dataset directory is missing or inconsistent."""


class MetricError(TasamError):
    """A metric is undefined for the given inputs (e.g. empty confusion matrix)."""


class NumericError(TasamError):
    """Training hit a non-finite value; carries the step and parameter group."""

    def __init__(self, message, step=None, group=None):
        super().__init__(message)
        self.step = step
        self.group = group


class ReproducibilityError(TasamError):
    """Two identical forward passes disagreed; the graph is not deterministic."""
