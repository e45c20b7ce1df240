"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed input: wrong shape, non-finite values, bad ranges."""


class DomainError(InputError):
    """A parameter left its mathematical domain (e.g. curve parameter outside [0, 1])."""


class DatasetError(Exception):
    """Dataset layout problems: empty classes, unreadable files, duplicates."""


class StoreError(Exception):
    """Persistence-layer failure."""


class CorruptFileError(StoreError):
    """Checksum mismatch, truncation, or bad magic bytes."""


class SchemaError(StoreError):
    """File does not match the strict schema (unknown or missing fields)."""


class SchemaVersionError(StoreError):
    """File schema version is not supported by this reader."""


class ArchMismatchError(StoreError):
    """Stored model architecture differs from the expected one."""


class NumericError(ArithmeticError):
    """Optimization produced non-finite values; the current trial is abandoned."""
