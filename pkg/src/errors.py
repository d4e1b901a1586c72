"""
Exception types shared by the attribution toolkit.
"""


class InvalidInputError(ValueError):
    """A precondition on an argument was violated."""


class ConfigError(InvalidInputError):
    """A configuration value could not be parsed or validated."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericError(ArithmeticError):
    """
    A computation produced a non-finite value.

    :param index: row or image index where the value was found, if known
    """

    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)


class TrainingDivergedError(NumericError):
    """The training loss became non-finite. Carries the state before the failing step."""

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, unreadable or of the wrong kind."""
