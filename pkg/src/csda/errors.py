"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range or unknown."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""
