class StructSvdError(Exception):
    """Base class for library errors."""


class InputError(StructSvdError, ValueError):
    """Invalid arguments, shapes or configuration."""


class NumericalError(StructSvdError, ArithmeticError):
    """A factorization or solve failed."""


class ParseError(InputError):
    """Malformed file contents."""
