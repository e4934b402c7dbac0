"""Shared exception hierarchy.

The CLI maps these onto exit codes: DataError -> 2, UsageError -> 64,
NumericError -> 70.  Module-specific errors subclass one of the three so
that new failure modes keep a well-defined exit status.
"""


class DdcmlError(Exception):
    """Base class for all package errors."""


class DataError(DdcmlError):
    """Malformed or inconsistent input data (files, manifests, volumes)."""


class UsageError(DdcmlError):
    """Invalid configuration or invalid call arguments."""


class NumericError(DdcmlError):
    """Non-finite values or other numeric failure inside a computation."""
