"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Bad arguments: dimension mismatch, out-of-range parameters, non-finite data."""


class ParseError(ValueError):
    """Malformed dataset or config text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, grad_norm=None):
        self.grad_norm = grad_norm
        super().__init__(message)


class DivergenceError(RuntimeError):
    """A simulation produced a non-finite iterate.

    ``trace`` holds the records collected before the blow-up.
    """

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)
