"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, ConvergenceError -> 4.
"""


class BidleakError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BidleakError):
    """Invalid configuration: bad parameter values, unknown keys, missing paths."""


class DataError(BidleakError):
    """Input data violates a precondition (empty, one-class, out of range...)."""


class SchemaError(DataError):
    """A CSV stream does not match the documented schema (bad header)."""


class ConvergenceError(BidleakError):
    """An iterative estimator failed to converge within its iteration budget."""


class PipelineStageError(BidleakError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
