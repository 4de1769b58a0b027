"""Exception hierarchy shared by all modules."""


class DfmlError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DfmlError):
    """Invalid configuration, unknown architecture, malformed config file."""


class InputError(DfmlError):
    """Caller passed data violating a documented precondition."""


class DataIOError(DfmlError):
    """Missing or corrupt on-disk dataset / checkpoint artifacts."""


class NumericError(DfmlError):
    """Non-finite values encountered during optimization."""


class ScenarioError(DfmlError):
    """Operation incompatible with the zoo scenario (e.g. averaging a heterogeneous zoo)."""


class InternalError(DfmlError):
    """Inconsistent internal state (e.g. BN layer count mismatch)."""


class TrainingFailure(DfmlError):
    """A pre-training run did not reach the required accuracy floor."""

    def __init__(self, message: str, achieved_accuracy: float):
        super().__init__(message)
        self.achieved_accuracy = achieved_accuracy
