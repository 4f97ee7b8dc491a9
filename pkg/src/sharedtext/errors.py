"""Exception hierarchy shared across the package."""


class SharedTextError(Exception):
    """Base class for all package errors."""


class ConfigError(SharedTextError):
    """Invalid configuration value or unknown config key."""


class DimensionError(SharedTextError):
    """Tensor or box shapes incompatible with the requested operation."""


class NumericError(SharedTextError):
    """NaN or Inf encountered where finite values are required."""


class LayerLookupError(SharedTextError):
    """Unknown layer name or invalid layer range."""


class EmptyRegionError(SharedTextError):
    """A region projected onto the feature map has no cells."""


class InfeasibleLabelError(SharedTextError):
    """Label sequence needs more frames than the input provides."""


class EnumerationLimitError(SharedTextError):
    """Brute-force enumeration would exceed its size cap."""


class GenerationError(SharedTextError):
    """Page layout could not be placed within the attempt budget."""


class CheckpointFormatError(SharedTextError):
    """Checkpoint magic or version not recognized."""


class CheckpointCorruptError(SharedTextError):
    """Checkpoint file truncated or structurally damaged."""


class DatasetError(SharedTextError):
    """Dataset missing, empty, or malformed."""
