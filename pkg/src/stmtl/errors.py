"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or supplied."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""
