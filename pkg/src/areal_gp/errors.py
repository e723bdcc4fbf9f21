"""Exception hierarchy shared by the library and the CLI.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class ArealGPError(Exception):
    """Base class for all package errors."""


class ValidationError(ArealGPError, ValueError):
    """Bad input: malformed files, violated preconditions, invalid config."""


class CalibrationError(ValidationError):
    """Too few usable maximum-likelihood fits to derive the priors."""


class NumericalError(ArealGPError, ArithmeticError):
    """A factorization or sampler block failed beyond recovery."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context
