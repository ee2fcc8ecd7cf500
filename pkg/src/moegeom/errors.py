"""Exception types raised across the toolkit."""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ToolkitError):
    """Operands have incompatible or invalid shapes."""


class BoundsError(ToolkitError):
    """An index or count is outside its valid range."""


class NotFoundError(ToolkitError):
    """A requested layer, section, or file entry does not exist."""


class NumericError(ToolkitError):
    """A numeric routine failed (non-convergence, out-of-range values)."""


class InsufficientDataError(ToolkitError):
    """Too few effective samples to carry out the computation."""


class DegenerateWeightsError(ToolkitError):
    """All sample weights are zero."""


class DegenerateInputError(ToolkitError):
    """An operand is identically zero where a nonzero value is required."""


class TrainingDivergedError(ToolkitError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}: loss is not finite")


class IncompatibleReportsError(ToolkitError):
    """Two reports cannot be compared (different expert or component counts)."""


class DumpFormatError(ToolkitError):
    """A byte stream is not a valid MGT1 container."""
