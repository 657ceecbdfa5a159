"""Exception hierarchy shared by every module."""


class SupermarketError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SupermarketError, ValueError):
    """A model object violates one of its invariants."""


class StructuralError(SupermarketError, ValueError):
    """Shapes or graph structure are incompatible (dimension mismatch, reducible chain)."""


class NumericError(SupermarketError, ArithmeticError):
    """A numerical procedure failed (singular matrix, residual too large)."""


class DomainError(NumericError):
    """An argument lies outside the domain of a function."""


class StabilityError(SupermarketError):
    """The load rho = lambda / mu is not strictly below one."""


class PreconditionError(SupermarketError, ValueError):
    """An operation was called on a model it does not apply to."""


class ConfigError(SupermarketError, ValueError):
    """Invalid or inconsistent run configuration."""


class IntegrationError(NumericError):
    """ODE integration left the admissible region."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DegenerateStateError(NumericError):
    """A ratio functional has a vanishing denominator at the given state."""


class FitError(NumericError):
    """A regression window is empty or otherwise unusable."""
