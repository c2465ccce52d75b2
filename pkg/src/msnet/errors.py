"""Exception hierarchy shared by every msnet module."""


class MsNetError(Exception):
    """Base class for all errors raised by msnet."""


class ShapeError(MsNetError, ValueError):
    """Array shapes do not agree with what an operation expects."""


class EmptyVolumeError(ShapeError):
    """A sequence with zero slices was passed where l >= 1 is required."""


class StaleCacheError(MsNetError):
    """A forward cache was used with a model whose parameters changed."""


class LabelError(MsNetError, ValueError):
    """A diagnosis label is outside {COVID, CAP, NORMAL}."""


class ConfigError(MsNetError, ValueError):
    """Invalid configuration values."""


class CheckpointError(MsNetError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ParamLengthError(CheckpointError):
    pass


class VolumeFormatError(MsNetError):
    """Base class for feature-volume file decoding failures."""


class VolumeBadMagicError(VolumeFormatError, BadMagicError):
    pass


class VolumeTruncatedError(VolumeFormatError, TruncatedFileError):
    pass


class VolumeSizeMismatchError(VolumeFormatError):
    """Header dimensions disagree with the payload size."""


class NonFiniteError(VolumeFormatError):
    """A feature volume contains NaN or Inf."""


class ManifestError(MsNetError, ValueError):
    """A manifest row could not be parsed or validated."""


class TrainingDivergedError(MsNetError):
    """The training loss became non-finite.

    ``model`` holds the last parameter state whose loss was finite and
    ``log`` the epochs completed before the failure.
    """

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log
