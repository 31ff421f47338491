"""Exception hierarchy shared across the package.

The CLI maps these onto disjoint exit codes: configuration errors exit 2,
data errors exit 3, numerical failures exit 4.
"""


class DdstackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DdstackError):
    """Invalid configuration: bad option values, missing columns, bad shapes of specs."""

    exit_code = 2


class DataError(DdstackError):
    """Unusable data: zero usable rows, missing treatment classes, etc."""

    exit_code = 3


class NumericalError(DdstackError):
    """Numerical failure during estimation, e.g. a degenerate denominator."""

    exit_code = 4
