"""Exception types shared across the package."""


class ContactLocError(Exception):
    """Base class for all contactloc errors."""

    exit_code = 1


class InputError(ContactLocError):
    """Bad arguments, dimensions, or option values."""

    exit_code = 1


class FormatError(InputError):
    """Malformed input file: wrong syntax, non-triangular faces, bad magic."""

    exit_code = 1


class ValidationError(ContactLocError):
    """Input parsed cleanly but violates a semantic invariant."""

    exit_code = 2


class SolverFailure(ContactLocError):
    """Active-set solver exceeded its iteration cap.

    ``best`` carries the best feasible iterate found before giving up.
    """

    exit_code = 3

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
