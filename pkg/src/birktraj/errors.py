"""Solver-specific exception types."""

__all__ = [
    "SingularPreconditionerError",
    "NumericalBreakdownError",
    "NewtonDivergenceError",
    "LineSearchStallError",
    "OracleValidationError",
]


class SingularPreconditionerError(RuntimeError):
    """A diagonal pivot block of the triangular preconditioner is singular."""

    def __init__(self, node: int):
        self.node = node
        super().__init__(
            f"singular preconditioner pivot at node index {node}"
        )


class NumericalBreakdownError(RuntimeError):
    """A matrix-vector product produced NaN or Inf during a Krylov solve."""


class NewtonDivergenceError(RuntimeError):
    """Newton residuals grew over several consecutive steps."""

    def __init__(self, message: str, history):
        self.history = list(history)
        super().__init__(message)


class LineSearchStallError(RuntimeError):
    """The merit line search failed to make progress."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class OracleValidationError(ValueError):
    """A problem definition's Jacobian oracle disagrees with finite differences."""
