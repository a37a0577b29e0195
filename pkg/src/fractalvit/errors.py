"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ContractError(ValueError):
    """A call violates a function's stated precondition."""


class ShapeError(ContractError):
    """Tensor shapes do not line up for the requested operation."""


class InvalidMaskError(ValueError):
    """An attention mask is malformed (e.g. a row with no allowed entries)."""
