"""Exception hierarchy shared across gridnav modules."""


class GridNavError(Exception):
    """Base class for all gridnav errors."""


class ShapeError(GridNavError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(GridNavError, RuntimeError):
    """Invalid use of the autodiff tape (e.g. backward on a non-scalar)."""


class ContextOverflowError(GridNavError, ValueError):
    """More timesteps supplied than the model's context length allows."""


class PlanningError(GridNavError, RuntimeError):
    """No route exists between the requested poses."""


class EpisodeRejected(GridNavError, ValueError):
    """Candidate episode violates the sampling constraints; resample."""


class DatasetFormatError(GridNavError, ValueError):
    """Dataset file is malformed or fails replay validation."""


class CheckpointError(GridNavError, ValueError):
    """Checkpoint file is malformed, tampered or version-incompatible."""


class NumericError(GridNavError, RuntimeError):
    """Training produced a non-finite quantity."""


class ConfigError(GridNavError, ValueError):
    """Run configuration contains unknown or invalid keys."""
