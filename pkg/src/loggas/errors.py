"""Exception types shared across the package."""


class LogGasError(Exception):
    """Base class for all loggas errors."""


class ExpressionError(LogGasError):
    """Malformed expression source or misuse of an expression tree.

    ``offset`` is the byte offset into the source where parsing failed,
    or None for semantic errors (unknown identifiers, unbound parameters).
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class SupportError(LogGasError):
    """A point lies outside the declared support of a weight or kernel."""


class ConfigError(LogGasError):
    """Invalid ensemble configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class QuadratureError(LogGasError):
    """Numerical integration failed to converge or met a non-finite sample."""

    def __init__(self, message, worst_interval=None):
        if worst_interval is not None:
            message = f"{message} (worst subinterval {worst_interval})"
        super().__init__(message)
        self.worst_interval = worst_interval


class DivergentMomentError(LogGasError):
    """A Gram moment integral diverges for the given spec."""


class SingularMatrixError(LogGasError):
    """Gram matrix numerically singular beyond the precision cap."""

    def __init__(self, message, condition_estimate=None):
        if condition_estimate is not None:
            message = f"{message} (condition estimate {condition_estimate:.3e})"
        super().__init__(message)
        self.condition_estimate = condition_estimate


class DiscretizationError(LogGasError):
    """Nystrom discretization produced eigenvalues inconsistent with a
    trace-class operator (e.g. imaginary parts above tolerance)."""


class GridError(LogGasError):
    """A tabulated quantity is sampled too coarsely for the requested
    operation (Richardson disagreement above tolerance)."""
