"""Exception hierarchy shared by all modules."""


class VocodetectError(Exception):
    """Base class for every error raised by this package."""


class AudioFormatError(VocodetectError):
    """Malformed RIFF/WAVE container."""


class UnsupportedAudioError(VocodetectError):
    """Well-formed WAV file with an encoding we do not read (non-PCM, not 16-bit)."""


class EmptyAudioError(VocodetectError):
    """Operation left no usable audio (e.g. a clip that is silent throughout)."""


class SignalRangeError(VocodetectError, ValueError):
    """A frequency or parameter lies outside its admissible range."""


class TooShortError(VocodetectError, ValueError):
    """Input shorter than a single analysis frame."""


class ResolutionError(VocodetectError, ValueError):
    """Filterbank has a filter without support on the DFT bin grid."""


class ShapeError(VocodetectError, ValueError):
    """Array dimensions disagree."""


class EmptyInputError(VocodetectError, ValueError):
    """A collection, score set or frame sequence is empty."""


class UndefinedCentroidError(VocodetectError, ValueError):
    """Spectral centroid requested for a clip without any spectral energy."""


class DataError(VocodetectError, ValueError):
    """Training data cannot support the requested model."""


class DivergenceError(VocodetectError, RuntimeError):
    """Gradient training produced a non-finite loss."""


class ManifestError(VocodetectError):
    """Manifest is unreadable, refers to missing files, or lacks a collection."""


class CompatibilityError(VocodetectError):
    """Model and features were produced under different feature configurations."""


class ConfigError(VocodetectError):
    """Invalid run configuration."""
