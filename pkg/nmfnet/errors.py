"""Exception hierarchy shared by every nmfnet module."""
from typing import Optional


class NmfError(ValueError):
    """Base class for all errors raised by nmfnet."""


class ShapeError(NmfError):
    pass


class NonFiniteError(NmfError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values (NaN/Inf) produced in {where}")


class NegativeInputError(NmfError):
    pass


class DegenerateFactorError(NmfError):
    """A latent column died: its weights sum to zero."""

    def __init__(self, index: int, message: Optional[str] = None):
        self.index = index
        super().__init__(message or f"latent column {index} has zero total weight")


class BudgetExceededError(NmfError):
    pass


class ConfigError(NmfError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DataFormatError(NmfError):
    pass


class CheckpointError(NmfError):
    pass


class TrainingError(NmfError):
    pass
