"""Exception types shared across the package."""


class GalstabError(Exception):
    """Base class for all package errors."""


class UsageError(GalstabError):
    """Bad arguments or inconsistent inputs (CLI exit code 2)."""


class DomainError(GalstabError):
    """Input outside the mathematical domain of an operation."""


class RangeError(GalstabError):
    """A requested value cannot be bracketed / is out of tabulated range."""


class NumericalError(GalstabError):
    """Quadrature or solver failed to reach the requested tolerance (CLI exit code 3)."""


class ConvergenceError(NumericalError):
    """An iterative solve did not converge."""
