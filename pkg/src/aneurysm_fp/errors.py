"""Exception hierarchy.

Everything raised on bad *input* derives from ``ValueError`` so callers that
only care about "the data was wrong" can catch that; the CLI maps
:class:`ParseError` (and ``OSError``) to exit status 2 and the rest to 1.
"""


class InvalidArgumentError(ValueError):
    pass


class GeometryMismatchError(ValueError):
    pass


class InvalidTransformError(ValueError):
    pass


class ValidationError(ValueError):
    """Raised when a document parses but its content breaks a contract.

    ``problems`` lists every offending entry, not just the first one.
    """

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class ParseError(ValueError):
    """Malformed file. ``offset`` is the byte offset of the bad field, if known."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
