"""Shared exception taxonomy. The CLI maps these onto process exit codes."""


class MriseqError(Exception):
    """Base class for all package errors."""


class UsageError(MriseqError):
    """Bad invocation: unknown flag values, inconsistent options (exit 2)."""


class DataError(MriseqError):
    """Malformed or missing input data (exit 3)."""


class VolumeFormatError(DataError):
    """Broken volume header/raw pair."""


class ManifestError(DataError):
    """Broken dataset manifest CSV."""


class CheckpointError(DataError):
    """Broken or incompatible model checkpoint."""


class NumericError(MriseqError):
    """Numeric failure such as a NaN loss (exit 4)."""
