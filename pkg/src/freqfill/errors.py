"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class NumericFault(ArithmeticError):
    """A computation produced NaN or Inf where finite values are required."""
