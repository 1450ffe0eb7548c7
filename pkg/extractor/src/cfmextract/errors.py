class ExtractorError(Exception):
    """Base for everything this package raises on purpose."""


class ConfigError(ExtractorError):
    """Unknown model or layer, or malformed configuration values."""


class ImageError(ExtractorError):
    """Unreadable image file or a crop box outside the image."""
