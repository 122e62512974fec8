"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: data/parse problems exit 2,
configuration problems exit 3, checkpoint/config mismatches exit 4.
"""


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class DataFormatError(ValueError):
    """A data file does not parse; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(DataFormatError):
    """File declares an unsupported format version."""


class TruncationError(DataFormatError):
    """File ends before the declared payload does."""


class ChecksumError(DataFormatError):
    """Stored checksum does not match the file contents."""


class CompatibilityError(RuntimeError):
    """Checkpoint and requested configuration disagree."""
