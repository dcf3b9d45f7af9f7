"""Exception types raised across the toolkit.

The CLI maps these onto exit codes: ``InputError`` subclasses give 1,
``ConvergenceError`` gives 2 and ``InconsistencyError`` gives 3.
"""


class QRHError(Exception):
    """Base class for all toolkit errors."""


class InputError(QRHError, ValueError):
    """Bad input data or arguments."""


class SchemaError(InputError):
    pass


class MalformedLineError(InputError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class OrderingError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CrossedBookError(MalformedLineError):
    pass


class IncompleteBookError(InputError):
    pass


class DomainError(InputError):
    pass


class UndefinedAESError(InputError):
    pass


class DegenerateGridError(InputError):
    pass


class NonErgodicError(InputError):
    pass


class ConvergenceError(QRHError):
    """An iterative routine did not reach its tolerance."""

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class InconsistencyError(QRHError):
    """Internal consistency violated (e.g. a thinning bound exceeded)."""
