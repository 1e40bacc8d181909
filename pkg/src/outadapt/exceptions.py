"""Error types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, sizes or settings."""


class DataError(ValueError):
    """Invalid sample contents, such as out-of-range labels."""


class NumericalError(ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""


class FormatError(OSError):
    """A dataset or checkpoint file could not be decoded."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConfigHashError(FormatError):
    """Checkpoint was written for a different network configuration."""
