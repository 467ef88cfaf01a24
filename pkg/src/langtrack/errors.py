"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class LangTrackError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(LangTrackError):
    """Operands have incompatible shapes, or an index is out of range."""


class NumericError(LangTrackError):
    """A computation produced NaN/Inf or was aborted for numeric reasons."""


class GraphError(LangTrackError):
    """Invalid use of the recording tape (e.g. backward on a non-scalar)."""


class BoxError(LangTrackError):
    """A bounding box violates its invariants (non-positive extent)."""


class DataError(LangTrackError):
    """A file, record, or corpus is missing or malformed."""


class ConfigError(LangTrackError):
    """A configuration file or value is invalid."""


class UsageError(LangTrackError):
    """Command-line arguments are invalid."""
