"""Exception hierarchy shared across the package.

The CLI maps ``UsageError`` to exit status 1 and every other ``LogosError``
to exit status 2.
"""


class LogosError(Exception):
    """Base class for all package errors."""


class UsageError(LogosError):
    pass


class ConfigError(LogosError, ValueError):
    pass


class PreconditionError(LogosError, ValueError):
    pass


class ContractError(LogosError, ValueError):
    pass


class ShapeError(LogosError, ValueError):
    pass


class CapacityError(LogosError, ValueError):
    pass


class EmptyInputError(LogosError, ValueError):
    pass


class ParseError(LogosError, ValueError):
    def __init__(self, message: str, path=None, line_no: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line_no is not None:
            where = f"{where}:{line_no}" if where else f"line {line_no}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line_no = line_no


class IntegrityError(LogosError, ValueError):
    pass
