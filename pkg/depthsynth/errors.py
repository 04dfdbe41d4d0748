"""Exception hierarchy for depthsynth."""


class DepthSynthError(Exception):
    """Base class for every error raised by depthsynth."""


class ShapeError(DepthSynthError, ValueError):
    """Tensor extents do not agree with what an operation requires."""


class ContractError(DepthSynthError):
    """A caller broke an operation's precondition."""


class ConfigError(DepthSynthError, ValueError):
    """A configuration value is outside its valid range."""


class DataError(DepthSynthError, ValueError):
    """Input data is empty or otherwise unusable."""


class FormatError(DepthSynthError, ValueError):
    """A file or byte stream is malformed."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses a variant this package does not read."""


class UnsupportedOpError(DepthSynthError):
    """A graph node has no registered backward rule."""


class DegenerateProjectionError(DepthSynthError):
    """Every reconstructed pixel fell outside the source image."""


class DegenerateMetricError(DepthSynthError):
    """A metric has no valid pixels to average over."""


class TrainingAbortedError(DepthSynthError):
    """Too many training batches were skipped to continue."""
