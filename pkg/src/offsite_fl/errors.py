"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class EmptySupervisionError(ValueError):
    """A masked loss was asked to average over zero selected positions."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class InputError(ValueError):
    """A runtime input violates a model limit (e.g. sequence too long)."""


class PartitionError(ValueError):
    """A dataset partition request cannot be satisfied."""


class AggregationError(ValueError):
    """Client LoRA sets are structurally incompatible; message names the record."""


class IntegrityError(RuntimeError):
    """A persisted artifact failed its integrity check."""
