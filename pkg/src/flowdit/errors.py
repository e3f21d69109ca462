"""Shared exception types.

CLI exit-code mapping: ConfigError -> 1, ValidationError/IntegrityError -> 2,
anything else -> 3.
"""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class ConfigError(ValueError):
    """Invalid model/stage/CLI configuration."""


class ValidationError(ValueError):
    """Data value outside its documented domain (scores, timesteps, records)."""


class IntegrityError(RuntimeError):
    """Corrupt or inconsistent on-disk artifact (checkpoint, cache, manifest)."""
