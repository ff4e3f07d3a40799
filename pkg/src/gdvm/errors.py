"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see ``gdvm.cli``).
"""


class GdvmError(Exception):
    exit_code = 1


class ConfigError(GdvmError, ValueError):
    exit_code = 1


class DimensionError(GdvmError, ValueError):
    exit_code = 1


class ContractError(GdvmError, RuntimeError):
    exit_code = 1


class DomainError(GdvmError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index

    exit_code = 3


class DataError(GdvmError, ValueError):
    exit_code = 2


class FormatError(DataError):
    pass


class CheckpointError(GdvmError):
    exit_code = 2


class NumericAbort(GdvmError, FloatingPointError):
    """Raised when a training loss turns NaN or infinite."""

    exit_code = 3

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
