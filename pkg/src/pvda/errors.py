"""Exception hierarchy shared by every pvda module."""


class PvdaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PvdaError, ValueError):
    """A configuration or shape contract was violated."""


class InputError(PvdaError, ValueError):
    """Input data (labels, files, samples) is malformed."""


class UsageError(PvdaError, ValueError):
    """An API was called outside its preconditions."""


class TrainingDivergedError(PvdaError, RuntimeError):
    """A loss became non-finite during training."""
