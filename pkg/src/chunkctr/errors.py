"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all package errors."""


class ShapeError(Error, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(Error, ValueError):
    """A configuration value violates its constraints."""


class GraphError(Error, RuntimeError):
    """A computation-graph contract was violated (e.g. non-scalar backward)."""


class InvariantError(Error, RuntimeError):
    """A state that must be impossible by construction was reached."""


class MetricError(Error, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class CheckpointError(Error, RuntimeError):
    """Checkpoint file is malformed, truncated, or of the wrong version."""


class CacheError(Error, RuntimeError):
    """Embedding cache lookup or file format failure."""


class TrainingError(Error, RuntimeError):
    """Training aborted (non-finite loss)."""
