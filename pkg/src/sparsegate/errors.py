class SparsegateError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DimensionError(SparsegateError, ValueError):
    exit_code = 2


class ConfigError(SparsegateError, ValueError):
    exit_code = 2


class FormatError(SparsegateError):
    exit_code = 4


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class TrainingDivergedError(SparsegateError):
    exit_code = 5


class AccountingError(SparsegateError):
    """Analytic MAC count disagrees with the instrumented counter."""

    exit_code = 6
