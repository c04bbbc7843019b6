"""Exception types shared across the package.

The CLI maps these onto process exit codes (config -> 2, I/O -> 3,
checkpoint -> 4); the service maps them onto HTTP statuses.
"""


class MstlError(Exception):
    """Base class for package errors."""


class DimensionError(MstlError, ValueError):
    """Operand shapes or channel counts do not line up."""


class ContractError(MstlError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(MstlError, ValueError):
    """Invalid stage, backbone, or CLI configuration."""


class DataIOError(MstlError, OSError):
    """Dataset or report file could not be read or written."""


class CheckpointError(MstlError, ValueError):
    """Checkpoint bytes are not a valid model snapshot."""


class DegenerateAnatomyError(MstlError, ValueError):
    """Lung segmentation failed: fewer than two usable components."""


class BoundsError(MstlError, ValueError):
    """A crop window falls outside the image."""


class ModelPairingError(MstlError, ValueError):
    """Two models expected to share a parameter manifest do not."""


class UndefinedMetricError(MstlError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC on one class)."""


class DegenerateEmbeddingError(MstlError, ValueError):
    """Zero vector cannot be normalized to unit length."""
