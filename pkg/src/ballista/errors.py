class BallistaError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(BallistaError, ValueError):
    """An argument violated its documented precondition."""


class NumericalFault(BallistaError, ArithmeticError):
    """A simulation or optimisation step produced non-finite values."""
