"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, file
problems exit 3 and anything raised during computation exits 4.
"""


class KeyschedError(Exception):
    exit_code = 4


class ConfigError(KeyschedError, ValueError):
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class BoundsError(KeyschedError, IndexError):
    pass


class OrderingError(KeyschedError, ValueError):
    pass


class NumericInputError(KeyschedError, ValueError):
    pass


class ShapeError(KeyschedError, ValueError):
    pass


class StateError(KeyschedError, RuntimeError):
    pass


class FormatError(KeyschedError, ValueError):
    """Malformed trace/checkpoint file; carries the offending line number."""

    exit_code = 3

    def __init__(self, message: str, lineno: int | None = None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class VersionError(FormatError):
    pass
