"""Exception types shared across the package."""


class TraitRegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TraitRegError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class ConfigError(TraitRegError, ValueError):
    """A model or training configuration is invalid."""


class DataError(TraitRegError, ValueError):
    """A dataset, manifest, or preprocessing input is invalid."""


class MetricError(TraitRegError, ValueError):
    """A metric cannot be computed on the given batch."""


class CheckpointError(TraitRegError, ValueError):
    """A checkpoint file is malformed or incompatible with the model."""


class TrainingDiverged(TraitRegError, RuntimeError):
    """Training produced a non-finite loss."""
