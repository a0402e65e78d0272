"""Exception types shared across the package."""

from __future__ import annotations


class StructSenseError(Exception):
    """Base class for all package-specific errors."""


class DegenerateEdgeError(StructSenseError):
    """An edge's endpoints (or node and anchor) coincide within tolerance."""


class DegenerateInputError(StructSenseError):
    """Input geometry is degenerate (e.g. all points collinear)."""


class AllUnmeasuredError(StructSenseError):
    """A sparsity rule would leave no measured node."""


class ShapeMismatchError(StructSenseError):
    """Array dimensions do not chain or do not match the graph."""


class BandOutsideNyquistError(StructSenseError):
    """Requested forcing passband exceeds the sample grid's Nyquist rate."""


class DivergedError(StructSenseError):
    """A trajectory or filter state left the trusted numeric range."""


class NonfiniteLossError(StructSenseError):
    """A training loss evaluated to NaN or infinity."""


class NonpositiveVarianceError(StructSenseError):
    """A likelihood was requested with a non-positive variance."""


class SingularInnovationError(StructSenseError):
    """Innovation covariance is numerically singular after regularization."""


class ZeroReferenceError(StructSenseError):
    """A normalized error metric was requested against an all-zero reference."""
