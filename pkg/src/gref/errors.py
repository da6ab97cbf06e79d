"""Exception types shared across the package."""


class GrefError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GrefError, ValueError):
    pass


class ShapeError(GrefError, ValueError):
    pass


class SchemaError(GrefError, ValueError):
    """A session record or file violates the expected schema."""


class ParseError(GrefError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(GrefError, ValueError):
    pass


class InvalidSequenceError(GrefError, ValueError):
    pass


class InvalidStateError(GrefError, RuntimeError):
    pass


class InvalidBatchError(GrefError, ValueError):
    pass


class UsageError(GrefError):
    pass


class UndefinedMetricError(GrefError, ValueError):
    pass
