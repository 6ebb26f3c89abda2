"""Exception hierarchy shared by all scenet modules.

The CLI maps these onto distinct exit codes (see scenet.cli), so library
code should raise the most specific class that applies.
"""


class SceError(Exception):
    """Base class for all scenet errors."""


class DimensionError(SceError):
    """Operands have incompatible shapes or lengths."""


class ContractError(SceError):
    """A documented precondition was violated (e.g. non-simplex weights,
    branch mode / input bundle mismatch)."""


class InputError(SceError):
    """Invalid input data: empty sets, missing text features, unknown
    categories, out-of-range fractions."""


class DataError(InputError):
    """A data file failed to load.  Carries the path and 1-based line
    number so the offending line can be located."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ParseError(DataError):
    """Malformed line: wrong field count, non-numeric value, duplicate id."""


class UnknownIdError(DataError):
    """A record references an item id absent from the item table."""


class ValidationError(DataError):
    """A structurally valid record violates an invariant (e.g. a triplet
    with a repeated id, an out-of-range answer index)."""


class ConfigError(SceError):
    """Inconsistent or unusable configuration values."""


class CheckpointError(SceError):
    """A checkpoint file is truncated, has the wrong version, or does not
    match the expected shapes."""


class NumericError(SceError):
    """A non-finite value appeared where finite arithmetic is required."""


class IoError(SceError):
    """Reading or writing an artifact failed at the filesystem level."""
