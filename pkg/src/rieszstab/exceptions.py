"""Error types shared across the package.

Each carries the process exit code the command line layer maps it to.
"""


class RieszstabError(Exception):
    """Base class for package errors."""

    exit_code = 1


class PreconditionError(RieszstabError):
    """Invalid parameters or inputs that violate a documented precondition."""

    exit_code = 2


class NonConvergenceError(RieszstabError):
    """An iterative or adaptive routine failed to reach its tolerance.

    ``residual`` holds the best value achieved, for reporting.
    """

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class OutputError(RieszstabError):
    """Unreadable input file or unwritable output path."""

    exit_code = 4
