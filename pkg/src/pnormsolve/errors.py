"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed or out-of-domain input."""


class InfeasibleError(ValueError):
    """The constraint system has no solution."""


class SolverFailure(RuntimeError):
    """An iterative solve did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleRhsError(SolverFailure):
    """Right-hand side is not in the range of the operator."""


class UnsupportedError(ValueError):
    """Parameter combination the algorithm does not handle."""


class WidthBudgetExceeded(RuntimeError):
    """Too many width-reduction steps; the energy bound was probably too small."""


class DegenerateGradient(ValueError):
    """The gradient has no component in the feasible direction space."""


class StagnationError(RuntimeError):
    """An outer iteration failed to decrease the objective."""


class PropertyViolation(AssertionError):
    """A runtime-checked invariant failed."""


class UnboundedInstanceError(ValueError):
    """A flow instance has a cycle of free edges with nonzero gradient sum."""


class CycleTouchingError(ValueError):
    """The zero-weight edges of an instance contain a cycle."""
