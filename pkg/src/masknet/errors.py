"""Exception hierarchy shared by every module.

Contract errors (bad arguments, shapes, modes) map to CLI exit code 1;
format errors (files on disk) map to exit code 2.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    pass


class ModeError(ContractError):
    pass


class UninitializedStatisticsError(ContractError):
    pass


class UnreliableOracleError(ContractError):
    """The function handed to the gradient checker is not deterministic."""


class OracleSizeError(ContractError):
    pass


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GenerationError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class FormatError(IOError):
    pass


class CorruptionError(FormatError):
    pass


class MigrationNeededError(FormatError):
    pass


class StructureError(FormatError):
    """Checkpoint tensors do not match the architecture its config describes."""
