"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class MotionLiftError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(MotionLiftError, ValueError):
    exit_code = 2
    kind = "config"


class DataError(MotionLiftError, ValueError):
    exit_code = 3
    kind = "data"


class ShapeError(DataError):
    pass


class NumericError(MotionLiftError, FloatingPointError):
    exit_code = 4
    kind = "numeric"


class GradcheckError(MotionLiftError):
    exit_code = 5
    kind = "gradcheck"


class CheckpointMismatch(ConfigError):
    """Checkpoint tensors do not fit the configured model."""

    def __init__(self, names, detail=""):
        self.names = sorted(names)
        msg = "checkpoint/config mismatch on tensors: " + ", ".join(self.names)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MalformedRecordError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class RangeError(DataError):
    pass
