"""Exception hierarchy shared across the package.

Exit-code mapping in the CLI: UsageError -> 1, DataError -> 2, OSError -> 3.
"""


class UsageError(Exception):
    """Bad flags, bad config file, contradictory options."""


class DataError(Exception):
    """Input data violates a documented contract."""


class SchemaError(DataError):
    """CSV header or column layout does not match the canonical schema."""


class CheckpointError(DataError):
    """Base class for checkpoint deserialization failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionError(CheckpointError):
    """Checkpoint version is not supported."""


class TruncatedError(CheckpointError):
    """File ends before the declared payload is complete."""


class ChecksumError(CheckpointError):
    """Trailing checksum does not match the file contents."""
