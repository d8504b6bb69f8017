"""Exception types shared across the package."""


class FusedetError(Exception):
    """Base class for all package errors."""


class ShapeError(FusedetError, ValueError):
    """Tensor rank/extent mismatch."""


class ConfigError(FusedetError, ValueError):
    """Invalid or inconsistent configuration."""


class BuildError(ConfigError):
    """Model graph cannot be constructed from the given configuration."""


class NumericError(FusedetError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class TapeStateError(FusedetError, RuntimeError):
    """Backward invoked on a tape that cannot serve it."""


class CheckError(FusedetError, RuntimeError):
    """Gradient check could not be carried out."""


class DataError(FusedetError, ValueError):
    """Malformed dataset content (annotations, targets)."""


class FileFormatError(FusedetError, ValueError):
    """Unparseable image or checkpoint container."""


class DatasetIOError(FusedetError, OSError):
    """Filesystem failure while reading or writing dataset files."""
