"""Exception types. Each carries the CLI exit code of its class."""
from __future__ import annotations


class OneWorldError(Exception):
    exit_code = 1


class ConfigError(OneWorldError):
    """Invalid scenario configuration. ``violations`` lists every problem found."""

    exit_code = 2

    def __init__(self, message: str, violations: list[str] | None = None):
        self.violations = list(violations or [message])
        super().__init__(message if violations is None else "\n".join(self.violations))


class InstabilityError(OneWorldError):
    exit_code = 3


class ResourceCapError(OneWorldError):
    exit_code = 4


class VerificationError(OneWorldError):
    exit_code = 5


class PacketEscapesGridError(ValueError):
    pass


class NonPositiveWidthError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


class OutOfSpanError(ValueError):
    pass


class NeighborCollapseError(ArithmeticError):
    pass


class AmbiguousZeroError(ArithmeticError):
    pass


class GradientValidationError(ArithmeticError):
    pass


class SingularGeometryError(ArithmeticError):
    pass


class InvalidPlanError(ValueError):
    pass


class BudgetExceededError(ResourceCapError):
    pass
