"""Exception hierarchy shared across the package."""


class AfbcLabError(Exception):
    """Base class for all package errors."""


class ConfigError(AfbcLabError):
    """Invalid configuration: bad shapes, out-of-range hyperparameters, unknown keys."""


class UsageError(AfbcLabError):
    """API misuse: wrong call order, out-of-range indices, empty containers."""


class DataError(AfbcLabError):
    """Invalid data fed to an operation (out-of-bound actions, missing annotations)."""


class NumericalError(AfbcLabError):
    """Non-finite values where finiteness is an invariant; aborts training."""


class CompositionError(AfbcLabError):
    """Dataset recipe cannot be satisfied; carries a per-tier deficit report."""

    def __init__(self, message, deficits=None):
        super().__init__(message)
        self.deficits = dict(deficits or {})


class DatasetIOError(AfbcLabError):
    """Base class for dataset/checkpoint persistence failures."""


class ChecksumError(DatasetIOError):
    pass


class TruncatedFileError(DatasetIOError):
    pass


class VersionError(DatasetIOError):
    pass
