"""Exception types raised across the package."""


class Distill3DError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1
    kind = "error"


class ShapeError(Distill3DError, ValueError):
    kind = "shape"


class BoundsError(Distill3DError, IndexError):
    kind = "bounds"


class CameraError(Distill3DError, ValueError):
    kind = "camera"


class EmptyInputError(Distill3DError, ValueError):
    kind = "empty-input"


class StateError(Distill3DError, RuntimeError):
    kind = "state"


class InvalidTeacherError(Distill3DError, ValueError):
    kind = "invalid-teacher"


class CheckpointError(Distill3DError, ValueError):
    kind = "checkpoint"


class PairingError(Distill3DError, ValueError):
    kind = "pairing"


class ProtocolError(Distill3DError, ValueError):
    kind = "protocol"


class UndefinedMetricError(Distill3DError, ValueError):
    kind = "undefined-metric"


class DivergenceError(Distill3DError, ArithmeticError):
    kind = "divergence"


class FormatError(Distill3DError, ValueError):
    kind = "format"
    exit_code = 3


class ConfigError(Distill3DError, ValueError):
    kind = "config"
    exit_code = 3


class MissingFileError(Distill3DError, FileNotFoundError):
    kind = "missing-file"
    exit_code = 4
