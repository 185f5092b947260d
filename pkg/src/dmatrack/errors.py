"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or file is structurally invalid."""


class SingularChannelError(RuntimeError):
    """The effective channel is rank-deficient and cannot be inverted."""
