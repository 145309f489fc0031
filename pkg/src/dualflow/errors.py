"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or channel counts do not agree."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""
