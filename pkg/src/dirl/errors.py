"""Exception hierarchy shared by all dirl modules."""

from __future__ import annotations


class DirlError(Exception):
    """Base class for every error raised by this package."""


class DomainError(DirlError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class DimensionError(DirlError, ValueError):
    """Array shapes that are supposed to agree do not."""


class BoundsOverflowError(DirlError, OverflowError):
    """A log-normalizer exceeded the configured magnitude ceiling."""


class InfeasibleParametersError(DirlError, ValueError):
    """Linear-policy parameters produce a non-positive concentration."""


class InfeasibleSetError(DirlError, ValueError):
    """The feasible parameter set of a projection is empty."""


class BoundaryError(DirlError, ValueError):
    """A score was requested at a point on the boundary of the simplex."""


class DegenerateColumnError(DirlError, ValueError):
    """A characteristic column has fewer than two distinct values."""


class SchemaError(DirlError, ValueError):
    """An input file does not follow the dataset schema."""


class AlignmentError(DirlError, ValueError):
    """Characteristics and returns are not aligned in time or assets."""


class InsufficientHistoryError(DirlError, ValueError):
    """Not enough past periods are available for the requested operation."""


class InvalidConfigError(DirlError, ValueError):
    """A configuration combines options that cannot work together."""


class SingularDesignError(DirlError, ValueError):
    """A regression design matrix is rank deficient."""
