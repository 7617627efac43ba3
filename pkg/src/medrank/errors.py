"""Shared exception types."""


class MedrankError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(MedrankError):
    """A file, record, or value does not match its declared schema."""


class DimensionError(MedrankError):
    """Array shapes or layout dimensions are inconsistent with the configuration."""


class ConfigError(MedrankError):
    """A run configuration is missing keys or contains invalid values."""
