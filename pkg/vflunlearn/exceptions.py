from typing import Any, Dict, List, Optional


class VFLError(Exception):
    """Base class for every error raised by vflunlearn."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class DimensionError(VFLError):
    """Raised when tensor shapes, parameter layouts or caches do not line up."""


class NumericError(VFLError):
    """Raised when a computation produces NaN or Inf.

    Attributes:
        trajectory: Per-epoch records collected before the failure, if any.
    """

    def __init__(self, message: str, trajectory: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trajectory = trajectory or []


class ArgumentError(VFLError, ValueError):
    """Raised when an argument is outside its valid range."""


class FormatError(VFLError):
    """Raised when a dataset file cannot be decoded.

    Attributes:
        offset: Byte offset at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(VFLError):
    """Raised when an experiment config cannot be parsed or validated.

    Attributes:
        diagnostics: One entry per problem, formatted as "<location>: <message>".
    """

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = diagnostics or []
        details = "\n".join(f"  {d}" for d in self.diagnostics)
        super().__init__(f"{message}\n{details}" if details else message)


class MissingArtifactError(VFLError):
    """Raised when run artifacts needed for a report are absent."""

    def __init__(self, message: str, missing: List[str]):
        super().__init__(f"{message}: {', '.join(missing)}")
        self.missing = missing
