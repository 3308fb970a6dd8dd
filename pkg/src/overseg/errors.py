"""Exception types shared across the toolkit.

Plain argument misuse raises ValueError; the classes here cover failures
that callers (notably the CLI) need to tell apart for exit codes.
"""


class OversegError(Exception):
    """Base class for overseg-specific failures."""


class FormatError(OversegError):
    """A byte stream or text file violates its format contract.

    ``offset`` is the byte offset (or ``line`` the 1-based line number)
    where the violation was detected, when known.
    """

    def __init__(self, message, offset=None, line=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        elif line is not None:
            message = f"{message} (at line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class ContentError(OversegError):
    """Input is well-formed but unusable (e.g. a requested class is empty)."""


class GenerationError(OversegError):
    """Sample synthesis failed; carries the sample index."""

    def __init__(self, message, index=None):
        self.message = message
        if index is not None:
            message = f"sample {index}: {message}"
        super().__init__(message)
        self.index = index


class NumericError(OversegError):
    """A computation produced non-finite values; carries location context."""

    def __init__(self, message, where=None):
        if where is not None:
            message = f"{message} (in {where})"
        super().__init__(message)
        self.where = where
