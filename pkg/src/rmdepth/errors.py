"""Exception types shared across the package."""


class RMDepthError(Exception):
    """Base class for all package errors."""


class ShapeError(RMDepthError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class InvalidArgumentError(RMDepthError, ValueError):
    """An argument violates an operation's precondition."""


class InvalidDepthError(InvalidArgumentError):
    """A depth value is non-positive where a positive depth is required."""


class InvalidConfigError(RMDepthError, ValueError):
    """A configuration object or file is inconsistent."""


class FormatError(RMDepthError, ValueError):
    """A binary container (dataset sample, checkpoint) is malformed."""


class ConfigMismatchError(FormatError):
    """A checkpoint's stored configuration does not match the live one."""


class EmptyEvaluationError(RMDepthError, ValueError):
    """An evaluation was requested over an empty valid-pixel set."""


class TrainingDiagnosticError(RMDepthError, RuntimeError):
    """A non-finite value was produced during training; carries term attribution."""

    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(message or f"non-finite value in loss term '{term}'")
