"""Exception hierarchy.

Every error carries ``where`` (``"module.operation"``) so that the CLI can
report which operation failed and map the failure to an exit code.
"""


class SuperOUError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for it."""

    exit_code = 1

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"[{where}] {message}" if where else message)


class DomainError(SuperOUError, ValueError):
    exit_code = 2


class PreconditionError(SuperOUError, ValueError):
    exit_code = 2


class ConfigError(SuperOUError, ValueError):
    exit_code = 2


class DivergenceError(SuperOUError, ArithmeticError):
    exit_code = 3


class NumericError(SuperOUError, ArithmeticError):
    """Quadrature or root-finding did not reach the requested tolerance."""

    exit_code = 3

    def __init__(self, message, where=None, achieved=None):
        self.achieved = achieved
        super().__init__(message, where)


class ResourceError(SuperOUError, RuntimeError):
    """A population exceeded its particle cap; ``partial`` holds the state reached."""

    exit_code = 4

    def __init__(self, message, where=None, partial=None):
        self.partial = partial
        super().__init__(message, where)
