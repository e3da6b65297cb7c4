"""Exception types raised across the package.

The CLI maps these to stable exit codes, so each family stays distinct.
"""


class GreinaError(Exception):
    """Base class for all package errors."""


class DataError(GreinaError):
    """Input data is malformed or inconsistent (CLI exit code 3)."""


class ParseError(DataError):
    """A CSV or key=value file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """Timestamps do not sit on a uniform grid."""


class AlignmentError(DataError):
    """Series cannot be aligned (different intervals or disjoint ranges)."""


class TimelineError(DataError):
    """Fault-timeline dates are mutually inconsistent."""


class ThermalInstabilityError(GreinaError):
    """A lumped coefficient makes the explicit update non-physical."""


class SimulationError(GreinaError):
    """The thermal model cannot be driven with the supplied inputs."""


class InsufficientDataError(GreinaError):
    """Not enough clean rows to fit or update a model (CLI exit code 4)."""


class DivergenceError(GreinaError):
    """Stochastic gradient descent stopped making progress."""


class NoSimilarOutletError(GreinaError):
    """The fleet offers no candidate for transfer initialisation."""


class StateCorruptionError(GreinaError):
    """A persisted monitor state file is unreadable (CLI exit code 5)."""
