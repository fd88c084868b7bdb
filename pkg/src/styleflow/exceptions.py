"""Exception hierarchy shared across the package."""


class StyleFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(StyleFlowError, ValueError):
    """A tensor shape violates an operation's contract."""


class StateError(StyleFlowError, RuntimeError):
    """An object was used before required initialization."""


class DegenerateScaleError(StyleFlowError):
    """An actnorm scale component collapsed below the invertibility floor."""


class SingularMatrixError(StyleFlowError):
    """A 1x1 convolution weight is too close to singular to invert."""


class ParameterError(StyleFlowError, ValueError):
    """A scalar hyperparameter is outside its legal range."""


class DatasetError(StyleFlowError):
    """A domain directory is empty, unreadable, or exhausted retries."""


class EncoderLoadError(StyleFlowError):
    """A perceptual-encoder weight file is missing tensors or corrupt."""


class NumericError(StyleFlowError):
    """A loss component became NaN or infinite."""


class InsufficientDataError(StyleFlowError):
    """Too few samples to fit a statistic."""


class CheckpointVersionError(StyleFlowError):
    """A checkpoint was written with an incompatible version tag."""


class ConfigError(StyleFlowError):
    """A run configuration file is malformed or has unknown keys."""
