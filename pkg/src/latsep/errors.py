"""Exception types shared across the toolkit."""


class LatsepError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LatsepError):
    """Invalid or inconsistent configuration (unknown key, bad combination)."""


class TriggerShapeError(LatsepError):
    """Trigger pattern/mask does not match the image it is applied to."""


class PlanningError(LatsepError):
    """Poison plan construction failed (e.g. not enough eligible samples)."""


class IntegrityError(LatsepError):
    """Artifact does not match its recorded digest or expected size."""


class TrainingDivergedError(LatsepError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss diverged at epoch {epoch}")


class UndefinedProfileError(LatsepError):
    """A separability profile was requested for single-role data."""


class StageError(LatsepError):
    """A pipeline stage failed; carries the stage name for exit codes."""

    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(message or f"stage '{stage}' failed")
