"""Exception types raised across the few-shot incremental learning app."""
from __future__ import annotations


class ImcoError(Exception):
    """Base class for every error raised by the app."""


class ShapeError(ImcoError, ValueError):
    """Raised when array dimensions do not compose."""


class LabelError(ImcoError, ValueError):
    """Raised when a label falls outside the logit width or class universe."""


class ConfigError(ImcoError, ValueError):
    """Raised when sizes, parameters or enum values are invalid."""

    def __init__(self, message: str, errors: dict | None = None) -> None:
        super().__init__(message)
        self.errors = errors or {}


class SamplingError(ImcoError, ValueError):
    """Raised when a class set cannot supply the requested episode."""


class DivergenceError(ImcoError, ArithmeticError):
    """Raised when losses, gradients or weights stop being finite."""


class DatasetParseError(ImcoError, ValueError):
    """Raised when a dataset CSV line cannot be parsed."""

    def __init__(self, path, line_number: int, reason: str) -> None:
        super().__init__(f"{path}, line {line_number}: {reason}")
        self.path = path
        self.line_number = line_number


class PipelineStageError(ImcoError, RuntimeError):
    """Raised when a stage of the incremental protocol fails."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage


class OutputError(ImcoError, OSError):
    """Raised when a run artifact cannot be written."""

    def __init__(self, path, cause: BaseException) -> None:
        super().__init__(f"Unable to write {path}: {cause}")
        self.path = path
