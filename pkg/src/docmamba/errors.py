"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a numeric operation."""


class ContractError(ValueError):
    """Shapes, ranges or preconditions of a call are violated."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values.

    ``step`` is the first sequence position at which it happened, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ParseError(ValueError):
    """Malformed input document; ``path`` locates the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
