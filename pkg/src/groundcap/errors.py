"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
DataValidationError -> 3, NumericalError -> 4.
"""


class GroundcapError(Exception):
    """Base class for all package errors."""


class ShapeError(GroundcapError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(GroundcapError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateStatisticsError(DomainError):
    """A statistic is undefined (too few points or zero variance)."""


class ContractError(GroundcapError, TypeError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class ConfigError(GroundcapError, ValueError):
    """Invalid or inconsistent configuration."""


class DataValidationError(GroundcapError, ValueError):
    """A dataset, checkpoint or report file failed validation."""


class NumericalError(GroundcapError, ArithmeticError):
    """Training produced a non-finite value."""
