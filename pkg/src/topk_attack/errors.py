"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A caller-supplied parameter is outside its documented range."""


class InvalidInputError(ValueError):
    """Input data is non-finite or otherwise unusable."""


class ShapeError(ValueError):
    """Array dimensions do not match what the model or dataset expects."""


class DatasetParseError(ValueError):
    """A dataset file could not be parsed.

    The offending (1-based) line number is kept on ``lineno``.
    """

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class InvariantError(RuntimeError):
    """An internal consistency check failed; this indicates a bug."""
