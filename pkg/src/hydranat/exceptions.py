"""Exception hierarchy shared by every hydranat module."""


class HydraNATError(Exception):
    """Base class for all library errors."""


class DimensionError(HydraNATError, ValueError):
    """Tensor shapes or extents do not agree."""


class InvalidSpecError(HydraNATError, ValueError):
    """A neighborhood spec is malformed or does not fit the feature map."""


class InvalidPlanError(HydraNATError, ValueError):
    """A head partition plan cannot be realized."""


class ConfigError(HydraNATError, ValueError):
    """A generator configuration or its parameters are inconsistent."""


class ContractError(HydraNATError, RuntimeError):
    """An API was called outside its contract (unsupported op, missing state)."""
