"""Exception types shared across the package."""


class GapfillError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(GapfillError):
    """A file does not match the expected schema (header, emptiness)."""


class RowError(GapfillError):
    """A data row failed to parse; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyCohortError(GapfillError):
    """No segment set satisfies the cohort selection constraints."""


class DegenerateStreamError(GapfillError):
    """A stream has zero value range and cannot be normalized."""


class PreconditionError(GapfillError):
    """An operation was called with inputs violating its contract."""


class ShapeError(GapfillError):
    """Array dimensions do not conform."""


class UntrainableError(GapfillError):
    """Training data contains no observed entries to fit against."""


class DivergenceError(GapfillError):
    """Training produced a non-finite loss; carries the epoch."""

    def __init__(self, epoch: int, message: str = ""):
        detail = message or "non-finite loss"
        super().__init__(f"epoch {epoch}: {detail}")
        self.epoch = epoch


class NumericalError(GapfillError):
    """A numerical routine failed (non-finite probe, SVD breakdown)."""


class UndefinedMetricError(GapfillError):
    """A metric is undefined for the given inputs (division by zero)."""


class ConfigError(GapfillError):
    """An invalid configuration value was supplied."""
