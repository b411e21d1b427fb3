"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""


class GenDDSError(Exception):
    exit_code = 1


class DimensionError(GenDDSError, ValueError):
    """Shapes of operands are incompatible."""


class ConfigurationError(GenDDSError, ValueError):
    """A configuration value or combination is invalid."""


class ContractError(GenDDSError, ValueError):
    """A documented precondition of an operation was violated."""


class PlanError(GenDDSError):
    """A training plan cannot run (missing upstream stage, bad stage name)."""


class CompatibilityError(GenDDSError):
    """Artifacts produced by different model versions were combined."""


class DataError(GenDDSError):
    exit_code = 2


class FormatError(DataError):
    """A serialized file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UpgradeNeededError(FormatError):
    """The file was written with an unsupported schema version."""


class NumericError(GenDDSError):
    exit_code = 3
