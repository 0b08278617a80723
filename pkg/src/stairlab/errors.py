"""Exception types shared across the package."""


class StairlabError(Exception):
    """Base class for package-specific errors."""


class ConfigError(StairlabError, ValueError):
    """Invalid configuration value or malformed config file."""


class TrainingError(StairlabError, RuntimeError):
    """Non-recoverable numerical problem during optimization."""
