"""Exception hierarchy shared by all csmf modules."""


class CSMFError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CSMFError, ValueError):
    pass


class ShapeError(CSMFError, ValueError):
    pass


class NumericError(CSMFError, ArithmeticError):
    pass


class LifecycleError(CSMFError, RuntimeError):
    """A stage transition was requested out of order."""


class DataError(CSMFError, ValueError):
    pass


class IngestionError(DataError):
    """Feature values outside what the model was built for (e.g. unknown ids)."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SamplingError(CSMFError, ValueError):
    pass


class VersionError(CSMFError, ValueError):
    """Checkpoint or vector file written by an incompatible format version."""
