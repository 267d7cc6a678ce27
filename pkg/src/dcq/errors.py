"""Exception types shared across the package."""


class DcqError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DcqError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(DcqError, RuntimeError):
    """An operation was called outside its documented contract."""


class NumericError(DcqError, ArithmeticError):
    """A computation produced or encountered a non-finite value."""


class ConfigError(DcqError, ValueError):
    """A configuration value is invalid or inconsistent."""


class CheckpointError(DcqError, RuntimeError):
    """A checkpoint file could not be read or written."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint is truncated or fails its checksum."""


class TrainingDiverged(NumericError):
    """Training aborted on a non-finite loss. Carries the offending batch."""

    def __init__(self, message, step=None, labels=None, batch=None):
        super().__init__(message)
        self.step = step
        self.labels = labels
        self.batch = batch


class UsageError(DcqError):
    """Bad command line invocation."""
