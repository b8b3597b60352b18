"""Exception types raised across the workbench."""


class TplfError(Exception):
    """Base class for all workbench errors."""


class ConfigurationError(TplfError, ValueError):
    """Invalid configuration, shape mismatch or malformed input."""


class NumericInstabilityError(TplfError, FloatingPointError):
    """A forward pass produced NaN/Inf values."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class EmptySequenceError(TplfError, ValueError):
    pass


class DegenerateEmbeddingError(TplfError, ValueError):
    pass


class EmptySupervisionError(TplfError, ValueError):
    pass


class AlreadyMergedError(TplfError, RuntimeError):
    pass


class DatasetError(TplfError, ValueError):
    """Raised by loaders; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(TplfError, IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class BackboneMismatchError(CheckpointError):
    pass
