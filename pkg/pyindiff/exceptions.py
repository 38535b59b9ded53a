"""Exceptions for pyindiff."""
from typing import Any, Optional


class IndiffError(Exception):
    """General pyindiff exception occurred."""

    pass


class DimensionMismatchError(IndiffError, ValueError):
    """When vector or matrix dimensions do not agree."""

    pass


class ModelValidationError(IndiffError):
    """A model or configuration invariant is violated."""

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        """Keep the dotted field path next to the message."""
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


class ConfigError(ModelValidationError):
    """The run configuration does not match the schema."""

    pass


class SingularVolatilityError(ModelValidationError):
    """The volatility matrix does not have full row rank."""

    def __init__(self, message: str, condition: float, where: Any = None) -> None:
        """Record the condition number and the offending (t, state)."""
        self.condition = condition
        self.where = where
        super().__init__(f"{message} (cond={condition:.3e}, at {where})")


class NumericalError(IndiffError):
    """A numerical routine failed."""

    pass


class ConvergenceError(NumericalError):
    """An iterative solver did not converge."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")) -> None:
        """Keep the iteration diagnostics."""
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")


class NonFiniteError(NumericalError):
    """A coefficient or simulated value is not finite."""

    def __init__(self, message: str, where: Any = None) -> None:
        """Record where the value blew up."""
        self.where = where
        super().__init__(f"{message} at {where}" if where is not None else message)


class UnboundedPayoffError(NumericalError):
    """The payoff must be bounded for the requested computation."""

    pass


class InfeasibleCandidateError(NumericalError):
    """A dual candidate leaves the region where the dual driver is finite."""

    def __init__(self, message: str, path: int = -1, step: int = -1) -> None:
        """Record the first offending (path, step)."""
        self.path = path
        self.step = step
        super().__init__(f"{message} (path={path}, step={step})")


class OracleUnavailableError(NumericalError):
    """No closed-form reference value exists for this configuration."""

    pass


class ReportError(IndiffError):
    """Writing the run artifacts failed."""

    pass
