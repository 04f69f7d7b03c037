"""Exception types raised across the package."""


class RfpcaError(Exception):
    """Base class for all package-specific errors."""


class InvalidDomainError(RfpcaError, ValueError):
    """Degenerate or malformed basis domain."""


class OutOfDomainError(RfpcaError, ValueError):
    """Evaluation time outside the basis domain; no extrapolation is done."""


class UnsupportedOrderError(RfpcaError, ValueError):
    """Spline order too low for the requested operation."""


class DimensionMismatchError(RfpcaError, ValueError):
    """Vector/matrix shapes inconsistent with the basis or model."""


class InvalidParamsError(RfpcaError, ValueError):
    """Model parameters violate their invariants (e.g. sigma2 <= 0)."""


class ConditioningError(RfpcaError, RuntimeError):
    """A linear system or decomposition is singular or rank deficient."""


class DegenerateFitError(RfpcaError, RuntimeError):
    """The data cannot support a fit (e.g. zero residual variance)."""


class NumericalOverflowError(RfpcaError, RuntimeError):
    """A likelihood evaluation produced a non-finite value."""


class CsvParseError(RfpcaError, ValueError):
    """Malformed input CSV; the message carries the offending line number."""
