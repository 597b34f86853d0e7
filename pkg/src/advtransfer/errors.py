"""Exception types shared across the package."""


class AdvTransferError(Exception):
    pass


class ConfigError(AdvTransferError, ValueError):
    pass


class UnknownTapError(ConfigError):
    pass


class UnsupportedLossError(AdvTransferError, TypeError):
    pass


class UnsupportedArchitectureError(AdvTransferError):
    pass


class TrainingFailure(AdvTransferError, RuntimeError):
    """Raised when a training recipe misses its floor; ``curves`` holds the history."""

    def __init__(self, message, curves=None):
        super().__init__(message)
        self.curves = curves or {}


class AttackAborted(AdvTransferError, RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class DegenerateDirectionError(AdvTransferError, ValueError):
    pass


class EmptyDatasetError(ConfigError):
    pass


class MissingLabelError(ConfigError):
    pass


class CheckpointError(AdvTransferError):
    pass
