"""Exception hierarchy shared across the package."""


class SpeechLmError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpeechLmError):
    """Tensor shapes incompatible for the requested operation."""


class ContractError(SpeechLmError):
    """A documented pre/post condition was violated by the caller."""


class ConfigError(SpeechLmError):
    """Invalid or inconsistent configuration."""


class DataFormatError(SpeechLmError):
    """Malformed on-disk artifact (manifest, feature file, checkpoint)."""


class CtcInfeasibleError(SpeechLmError):
    """Target sequence cannot be aligned within the given number of frames."""


class DecodeError(SpeechLmError):
    """Beam search aborted (e.g. scorer produced NaN)."""


class DependencyError(SpeechLmError):
    """A required upstream artifact (checkpoint, corpus) is missing."""
