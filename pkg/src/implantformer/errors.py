"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each class."""


class ImplantFormerError(Exception):
    exit_code = 1


class VolumeFormatError(ImplantFormerError):
    exit_code = 3


class VolumeHeaderError(VolumeFormatError):
    """Bad magic or truncated header."""


class VolumeSizeError(VolumeFormatError):
    """Declared dimensions disagree with the payload length."""


class BoundaryError(VolumeFormatError, ValueError):
    """crown_boundary outside (0, depth)."""


class TrackError(ImplantFormerError, ValueError):
    exit_code = 4


class DegenerateFitError(ImplantFormerError, ValueError):
    exit_code = 4


class ConfigError(ImplantFormerError, ValueError):
    exit_code = 4


class ShapeError(ImplantFormerError, ValueError):
    exit_code = 4


class EvaluationError(ImplantFormerError, ValueError):
    exit_code = 5


class CheckpointError(ImplantFormerError):
    exit_code = 3


class TrainingDivergedError(ImplantFormerError, FloatingPointError):
    exit_code = 6
