"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation or layer."""


class ConfigError(ValueError):
    """A model, stage or run configuration is invalid."""


class CheckpointError(ValueError):
    """A checkpoint or embedding archive is malformed or incompatible."""


class TrainingError(RuntimeError):
    """Training cannot continue (empty data, non-finite loss, ...)."""
