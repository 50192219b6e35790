"""Exception hierarchy shared across the package.

CLI exit codes map onto this hierarchy: usage errors exit 1, DataError 2,
NumericError 3.
"""


class MidarError(Exception):
    """Base class for all package-raised errors."""


class DataError(MidarError):
    """Malformed, inconsistent, or duplicate input data."""


class MalformedRecordError(DataError):
    """A file or stream record could not be parsed."""


class SchemaVersionError(DataError):
    """A persisted file declares an unsupported schema version."""


class ShapeMismatchError(DataError):
    """Persisted tensors disagree with their declared shapes."""


class NumericError(MidarError):
    """A numeric procedure received degenerate input or failed to converge."""
