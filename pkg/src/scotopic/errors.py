class ScotopicError(Exception):
    """Base class for every error raised by scotopic."""


class ConfigError(ScotopicError, ValueError):
    """Invalid or unknown configuration entry."""


class SensorError(ScotopicError, ValueError):
    """Invalid sensor input: intensities, noise parameters or stream bounds."""


class DatasetError(ScotopicError, ValueError):
    """Malformed dataset file or inconsistent labels."""


class ModelError(ScotopicError, ValueError):
    """Shape mismatch or invalid network state."""


class TrainingDivergedError(ScotopicError):
    """The training loss became NaN or infinite."""


class ThresholdDivergedError(ScotopicError):
    """The relaxed Bayes risk became NaN during threshold optimization."""


class LightEstimatorError(ScotopicError, ValueError):
    """Light-level estimator could not be fitted or applied."""


class SpikingError(ScotopicError, ValueError):
    """Invalid spiking runtime call (time order, threshold)."""


class StageError(ScotopicError):
    """A pipeline stage failed; `stage` names it and `__cause__` holds the error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class DecisionError(ScotopicError, ValueError):
    """Invalid decision query: empty grid, stream too short, unknown regime."""
