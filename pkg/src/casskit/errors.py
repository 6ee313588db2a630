"""Exception hierarchy.

Everything a caller can fix by changing inputs or config derives from
``CassValidationError`` (CLI exit code 1); failures during a run derive from
``CassRuntimeError`` (exit code 2).
"""


class CassError(Exception):
    pass


class CassValidationError(CassError, ValueError):
    pass


class CassRuntimeError(CassError, RuntimeError):
    pass


class ConfigError(CassValidationError):
    """Invalid configuration. ``path`` points at the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class RegistryError(CassValidationError):
    pass


class SpecError(CassValidationError):
    pass


class PairingError(CassValidationError):
    pass


class ProtocolError(CassValidationError):
    pass


class ComparisonError(CassValidationError):
    pass


class UndefinedMetricError(CassValidationError):
    pass


class EmissionError(CassValidationError):
    pass


class StateError(CassValidationError):
    pass


class CheckpointFormatError(CassValidationError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"checkpoint field {field!r}: {message}" if field else message)


class NonFiniteLossError(CassRuntimeError):
    """Raised when a training step produces a non-finite loss.

    ``snapshot`` holds the diagnostic state at the failing step.
    """

    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class LayerRangeError(CassValidationError, IndexError):
    pass


class UnsupportedArchitectureError(CassValidationError):
    pass
