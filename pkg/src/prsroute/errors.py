"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code (see ``prsroute.cli``).
"""


class PRSRouteError(Exception):
    exit_code = 1


class InvalidInputError(PRSRouteError, ValueError):
    """Non-finite numbers, unknown token ids, empty sequences and the like."""

    exit_code = 4


class DimensionError(PRSRouteError, ValueError):
    exit_code = 4


class ParseError(PRSRouteError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    exit_code = 4

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(PRSRouteError, ValueError):
    exit_code = 4


class ConfigError(PRSRouteError, ValueError):
    exit_code = 5


class ContractError(PRSRouteError, RuntimeError):
    exit_code = 1
