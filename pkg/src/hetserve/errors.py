"""Exception types shared across hetserve modules."""


class HetserveError(Exception):
    """Base class for all hetserve errors."""


class ParameterError(HetserveError, ValueError):
    """An argument is outside its documented domain."""


class FormatError(HetserveError, ValueError):
    """Malformed input data (trace files, scenario files)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(HetserveError, RuntimeError):
    """An operation was called on an object in an unusable state."""


class ConfigurationError(HetserveError, ValueError):
    """An instance pool or budget configuration is invalid or infeasible."""


class SimulationInvariantError(HetserveError, RuntimeError):
    """Internal invariant violated during a simulation run; the run aborts."""
