"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented invariant (bad values, dims, ranges)."""


class FormatError(ValueError):
    """A file does not conform to its binary or text layout."""


class ConfigurationError(ValueError):
    """A configuration is missing or inconsistent with the requested operation."""


class InsufficientDataError(ValueError):
    """Not enough samples to fit a model."""
