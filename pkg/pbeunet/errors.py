"""Structured exceptions raised across the PBE-UNet engine."""
from typing import Any, Optional


class PbeError(ValueError):
    """Base class for every engine error."""


class ShapeError(PbeError):
    """An operand has the wrong extent along a named dimension."""

    def __init__(self, op: str, dim: str, expected: Any, got: Any, detail: str = ""):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        message = f"{op}: dimension {dim} expected {expected}, got {got}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class TapeError(PbeError):
    """Misuse of the recorded graph (non-scalar root, double backward...)."""


class NormalizationError(PbeError):
    """Batch normalization cannot run with the given statistics."""


class PgmFormatError(PbeError):
    """Malformed or truncated PGM file."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class DatasetError(PbeError):
    """A dataset directory is inconsistent."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        super().__init__(message if sample_id is None else f"{message}: {sample_id}")


class MissingGradientError(PbeError):
    """A learnable parameter has no gradient at update time."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient")


class TrainingDivergedError(PbeError):
    """The loss became non-finite."""

    def __init__(self, tensor_name: str, iteration: int):
        self.tensor_name = tensor_name
        self.iteration = iteration
        super().__init__(f"non-finite loss at iteration {iteration}; first non-finite tensor: {tensor_name}")


class CheckpointError(PbeError):
    """A checkpoint file cannot be decoded."""
