"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, NumericError -> 3,
DataError -> 4. Everything else is a bug and escapes as a traceback.
"""


class TtsegError(Exception):
    pass


class ConfigError(TtsegError):
    """Bad configuration, bad shapes, unknown names, infeasible specs."""


class ShapeError(ConfigError):
    """Tensor dimension mismatch; message names both shapes."""


class ContractError(TtsegError):
    """A caller violated an API contract (e.g. backward on a non-scalar)."""


class NumericError(TtsegError):
    """Non-finite values or numerically degenerate states."""


class DegenerateFeatureError(NumericError):
    """A feature row has (near-)zero norm where a direction is required."""

    def __init__(self, msg, rotation=None, step=None):
        super().__init__(msg)
        self.rotation = rotation
        self.step = step


class GradCheckError(NumericError):
    """The finite-difference oracle could not run (non-deterministic f)."""


class DataError(TtsegError):
    """Broken or truncated files, invalid payloads."""


class LabelError(DataError):
    """A class id is outside the configured palette."""


class CheckpointError(DataError):
    """Checkpoint does not match the model it is restored into."""


class ShiftError(ConfigError):
    """A shift profile is invalid or would destroy the scene."""


class AugmentError(ConfigError):
    """An augmentation could not produce a valid scene."""
