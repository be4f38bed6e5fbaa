"""Exception hierarchy shared by all protosed modules."""


class ProtoSEDError(Exception):
    """Base class for every error raised by this package."""


class FormatError(ProtoSEDError, ValueError):
    """Input file or table has an unsupported layout or encoding."""


class AnnotationValidationError(ProtoSEDError, ValueError):
    """An annotation row violates onset < offset or uses an unknown token."""


class EmptyInputError(ProtoSEDError, ValueError):
    """Audio or feature input contains no usable samples."""


class ConfigError(ProtoSEDError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(ProtoSEDError, ValueError):
    """Array shape does not match what the operation expects."""


class StateError(ProtoSEDError, RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. backward before forward)."""


class ChecksumError(ProtoSEDError, ValueError):
    """Checkpoint payload does not match the checksum stored in its header."""


class SamplingError(ProtoSEDError, ValueError):
    """Episode sampling failed because a class has no usable audio."""


class TrainingAborted(ProtoSEDError, RuntimeError):
    """Training stopped because a loss or gradient became non-finite."""
