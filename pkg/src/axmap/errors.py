"""Exception hierarchy shared across the package."""


class AxmapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AxmapError):
    """Invalid input data, file content, or argument combination."""


class FormatError(ValidationError):
    """A binary or text artifact does not follow its declared format."""


class QueryError(ValidationError):
    """Query text rejected by the parser or by semantic checks."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class InternalError(AxmapError):
    """An internal invariant was violated; indicates a bug, not bad input."""
