"""Custom exceptions for the ViT zero-shot pipeline.

Exception Hierarchy:
    VitZslError (base)
    ├── ValidationError
    │   ├── DimensionError
    │   ├── ConfigurationError
    │   ├── DatasetError
    │   │   └── InductiveViolationError
    │   ├── ImageFormatError
    │   ├── CheckpointFormatError
    │   ├── SpecError
    │   └── ProtocolError
    ├── ContractError
    └── NumericalError

ValidationError subclasses describe bad input (files, configs, shapes) and
map to exit code 2 on the command line. Everything else is an internal error.
"""
from __future__ import annotations

from typing import Any, Optional, Sequence


class VitZslError(Exception):
    """Base exception for the pipeline."""

    def __init__(self, message: str, details: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> dict:
        """Convert exception to dict for JSON reports and logs."""
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "details": self.details,
        }


# === Input Validation Errors ===


class ValidationError(VitZslError):
    """Invalid input: configuration, file contents or shapes."""

    pass


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Sequence[int], reason: Optional[str] = None):
        if shapes:
            message = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        else:
            message = f"{op}: invalid shape"
        if reason:
            message += f" ({reason})"
        super().__init__(message, {"op": op, "shapes": [list(s) for s in shapes]})
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class ConfigurationError(ValidationError):
    """Invalid model, training or run configuration."""

    def __init__(self, message: str, field: Optional[str] = None, value: Any = None):
        details = {}
        if field:
            details["field"] = field
            details["value"] = value
        super().__init__(message, details)
        self.field = field


class DatasetError(ValidationError):
    """Dataset bundle is missing a file or contains a bad row."""

    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        details: dict = {}
        if path is not None:
            details["path"] = str(path)
            message = f"{message} [{path}"
            message += f", row {row}]" if row is not None else "]"
        if row is not None:
            details["row"] = row
        super().__init__(message, details)
        self.path = path
        self.row = row


class InductiveViolationError(DatasetError):
    """Train manifest references a class outside the seen set."""

    def __init__(self, class_id: int, path: Optional[str] = None, row: Optional[int] = None):
        super().__init__(
            f"Inductive violation: unseen class {class_id} in train manifest",
            path=path,
            row=row,
        )
        self.details["class_id"] = class_id
        self.class_id = class_id


class ImageFormatError(ValidationError):
    """Image file is not a valid PPM/PGM of the expected geometry."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"Invalid image {path}: {reason}", {"path": str(path), "reason": reason})
        self.path = path


class CheckpointFormatError(ValidationError):
    """Checkpoint file is truncated, has a wrong header or mismatched buffers."""

    def __init__(self, path: str, reason: str):
        super().__init__(
            f"Invalid checkpoint {path}: {reason}", {"path": str(path), "reason": reason}
        )
        self.path = path


class SpecError(ValidationError):
    """Synthetic dataset spec cannot be rendered."""

    pass


class ProtocolError(ValidationError):
    """Evaluation protocol precondition failed (empty class, one-sided split)."""

    pass


# === Internal Errors ===


class ContractError(VitZslError):
    """A caller broke a function contract (non-scalar loss, empty trace, ...)."""

    pass


class NumericalError(VitZslError):
    """A tensor operation produced non-finite values."""

    def __init__(self, op: str, shape: Sequence[int]):
        super().__init__(
            f"{op} produced non-finite values (shape {tuple(shape)})",
            {"op": op, "shape": list(shape)},
        )
        self.op = op
