"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
:class:`DataError` exits 2, :class:`NumericalError` exits 3.
"""


class HemotriageError(Exception):
    """Base class for package errors."""


class DataError(HemotriageError):
    """Missing, malformed, or inconsistent input data."""


class NumericalError(HemotriageError):
    """Numerical failure (non-finite values, divergence, degenerate input)."""
