"""Error hierarchy shared by the simulation and detection packages.

Every error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

from typing import Any, Optional


class FdiaError(Exception):
    exit_code = 2


class CaseError(FdiaError, ValueError):
    """A grid case document or value object violates the case schema."""


class LayoutError(FdiaError, ValueError):
    """Measurement or feature layouts from different cases were mixed."""


class DatasetFormatError(FdiaError):
    """A dataset or checkpoint file is corrupt or truncated."""


class NumericalError(FdiaError, ArithmeticError):
    exit_code = 3


class PowerFlowError(NumericalError):
    def __init__(self, message: str, mismatch: float = float("nan"), iterations: int = 0) -> None:
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


class EstimationError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, message: str, trace: Optional[Any] = None) -> None:
        super().__init__(message)
        self.trace = trace


class ConfigError(FdiaError, ValueError):
    """A configuration document has unknown keys or invalid values."""

    exit_code = 1
