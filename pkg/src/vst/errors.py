"""Exception types shared across the package."""


class VSTError(Exception):
    """Base class for all package errors."""


class DimensionError(VSTError, ValueError):
    pass


class NumericInputError(VSTError, ValueError):
    pass


class ContractError(VSTError, RuntimeError):
    """An operation was called outside of its documented preconditions."""


class ConfigError(VSTError, ValueError):
    pass


class CheckpointError(VSTError, ValueError):
    pass


class NumericFailure(VSTError, RuntimeError):
    """Training produced a non-finite loss.

    ``dump_path`` points at the saved offending batch, if one was written.
    """

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
