"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values (schedule ranges, client counts, ...)."""


class IngestionError(ValueError):
    """Malformed or inconsistent dataset files."""


class NumericError(FloatingPointError):
    """Non-finite values encountered during training or evaluation."""
