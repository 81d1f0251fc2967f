"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A requested configuration is invalid (bad sizes, bounds, or options)."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class EvaluationError(RuntimeError):
    """An evaluation could not produce a meaningful result (e.g. empty mask)."""


class DataError(RuntimeError):
    """Persisted data is missing, corrupt, or has an incompatible version."""


class ParseError(ValueError):
    """A serialized document does not match its schema.

    ``location`` names the offending key or token when known.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
