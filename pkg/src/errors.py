"""
Exception hierarchy shared by every module.

Each error carries a short machine-readable ``code`` so the CLI (and any caller
that wants structured output) can report failures without parsing messages.
Subclasses also inherit the builtin they specialise, so ``except ValueError``
keeps working for callers that do not know about this module.
"""

from __future__ import annotations

from typing import ClassVar


class ToolkitError(Exception):
    code: ClassVar[str] = "internal_error"

    def to_payload(self) -> dict[str, str]:
        return {"code": self.code, "message": str(self)}


class SizingError(ToolkitError, ValueError):
    code = "sizing_error"


class ValidationError(ToolkitError, ValueError):
    code = "validation_error"


class CorruptionError(ToolkitError, ValueError):
    code = "corruption_error"


class FormatError(ToolkitError, ValueError):
    code = "format_error"


class DispatchError(ToolkitError, ValueError):
    code = "dispatch_error"


class CapacityError(ToolkitError, ValueError):
    code = "capacity_error"


class StructuralError(ToolkitError, ValueError):
    code = "structural_error"


class ConfigurationError(ToolkitError, ValueError):
    code = "configuration_error"


class DegenerateBatchError(ToolkitError, ValueError):
    code = "degenerate_batch"


class UndefinedMetricError(ToolkitError, ValueError):
    code = "undefined_metric"


class UsageError(ToolkitError, RuntimeError):
    code = "usage_error"


class ModelError(ToolkitError, RuntimeError):
    code = "model_error"
