"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument violates an operation's precondition or a type invariant."""


class ParseError(ValueError):
    """A text input (point file, manifest, config) could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A binary input (PNG, feature file, checkpoint) has an unsupported layout."""
