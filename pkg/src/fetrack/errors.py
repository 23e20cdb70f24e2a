"""Exception hierarchy shared by every fetrack module."""


class FetrackError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 2


class NotFound(FetrackError, FileNotFoundError):
    pass


class ParseError(FetrackError, ValueError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.offset = offset


class GeometryError(FetrackError, ValueError):
    pass


class RangeError(FetrackError, ValueError):
    exit_code = 1


class ConfigError(FetrackError, ValueError):
    exit_code = 1


class ShapeError(FetrackError, ValueError):
    pass


class BoxError(FetrackError, ValueError):
    pass


class StateError(FetrackError, RuntimeError):
    pass


class DataError(FetrackError, ValueError):
    pass


class NumericsError(FetrackError, ArithmeticError):
    exit_code = 3
