class ConfigurationError(ValueError):
    """Invalid constant or hyperparameter (non-positive d, c3, gamma, ...)."""


class InvariantViolation(RuntimeError):
    """A construction that should hold by design did not."""


class CheckpointError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite. ``checkpoint`` holds the last finite state."""

    def __init__(self, message: str, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
