"""Exception types shared by the factorization services."""


class NrCntfError(Exception):
    """Base class for every error raised by this package."""


class InputError(NrCntfError, ValueError):
    """Rejected input: bad dimensions, out-of-range values, malformed files.

    Args:
        message (str): Human readable description.
        line (int, optional): 1-based line number in the offending file.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(NrCntfError, RuntimeError):
    """The solver could not continue (non-finite objective, bad state)."""
