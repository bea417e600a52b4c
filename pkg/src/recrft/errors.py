"""Exception hierarchy shared by every module."""


class RecRFTError(Exception):
    """Base class for all package errors."""


class ValidationError(RecRFTError, ValueError):
    """Input violates a documented precondition."""


class ConfigError(ValidationError):
    """Invalid or inconsistent configuration."""


class ParseError(ValidationError):
    """Malformed input record. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IngestError(ValidationError):
    """Well-formed record that cannot be admitted (duplicate id, dangling reference)."""


class UnknownItemError(RecRFTError, KeyError):
    """Lookup of an item id that is not in the catalog / table."""

    def __str__(self) -> str:  # KeyError quotes its arg otherwise
        return str(self.args[0]) if self.args else "unknown item"


class TrainingError(RecRFTError, RuntimeError):
    """Numerical failure during training (empty data, non-finite gradient)."""


class GenerationError(RecRFTError, RuntimeError):
    """Synthetic instance could not be produced within the retry budget."""


class InvalidInstanceError(ValidationError):
    """Query instance has zero or several satisfying candidates."""


class CheckpointError(RecRFTError, IOError):
    """Checkpoint missing, corrupt or incompatible with the current build."""
