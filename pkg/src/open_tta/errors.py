from __future__ import annotations

from typing import Any, Dict, Optional


class OpenTTAError(Exception):
    """Base error. `code` is stable and machine readable, `context` holds the offending values."""

    code = "open_tta_error"

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        if not self.context:
            return f"[{self.code}] {self.message}"
        ctx = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"[{self.code}] {self.message} ({ctx})"


class ShapeMismatchError(OpenTTAError):
    code = "shape_mismatch"


class BatchTooSmallError(OpenTTAError):
    code = "batch_too_small"


class NonFiniteError(OpenTTAError):
    code = "non_finite"


class InvalidDistributionError(OpenTTAError):
    code = "invalid_distribution"


class TraceMismatchError(OpenTTAError):
    code = "trace_mismatch"


class DivergenceError(OpenTTAError):
    code = "divergence"


class SingleClassError(OpenTTAError):
    code = "single_class"


class EmptyEvaluationError(OpenTTAError):
    code = "empty_evaluation"


class TabularFormatError(OpenTTAError):
    code = "tabular_format"

    def __init__(self, message: str, line: Optional[int] = None, **context: Any) -> None:
        super().__init__(message, line=line, **context)
        self.line = line


class CheckpointFormatError(OpenTTAError):
    code = "checkpoint_format"


class SchemaVersionError(OpenTTAError):
    code = "schema_version"


class ConfigValidationError(OpenTTAError):
    code = "config_validation"


class LabelRangeError(OpenTTAError):
    code = "label_range"


class RunAbortedError(OpenTTAError):
    code = "run_aborted"


class BundleFormatError(OpenTTAError):
    code = "bundle_format"
