"""Exception hierarchy shared by every GGCF module.

All errors derive from ValueError so callers that only care about "bad
input" can keep catching ValueError.
"""

from typing import Optional


class GGCFError(ValueError):
    """Base class for all recommender errors."""


class DimensionError(GGCFError):
    """Shapes or lengths do not line up."""


class DomainError(GGCFError):
    """Input lies outside the domain of an operation (e.g. off the hyperboloid)."""


class NumericError(GGCFError):
    """A non-finite value was produced or supplied."""


class DegenerateInputError(GGCFError):
    """Input is well-formed but carries no usable information."""


class ConfigError(GGCFError):
    """A configuration value violates its invariant."""


class EmptyDatasetError(GGCFError):
    """A dataset file holds no interactions."""


class IncompatibleCheckpointError(GGCFError):
    """A checkpoint does not match the format version, split or config in use."""


class ParseError(GGCFError):
    """A raw dataset line could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(f"{location}{message}")


# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the CLI exit code contract."""
    if isinstance(error, ConfigError):
        return EXIT_USAGE
    if isinstance(error, (NumericError, DomainError, DimensionError)):
        return EXIT_NUMERIC
    if isinstance(error, (GGCFError, OSError)):
        return EXIT_DATA
    return EXIT_USAGE
