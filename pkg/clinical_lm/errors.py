"""
Exception hierarchy for clinical_lm.

Every error carries an ``error_key`` so the CLI can print a single
machine-parseable category (``error=<key> <message>``). Subclasses also
inherit the closest builtin so callers that catch ValueError/RuntimeError
keep working.
"""
from typing import Optional


class ClinicalLMError(Exception):
    """Base error with a stable, machine-readable ``error_key``."""

    error_key = "error"

    def __init__(self, message: str, error_key: Optional[str] = None):
        if error_key:
            self.error_key = error_key
        super().__init__(message)


class ConfigError(ClinicalLMError, ValueError):
    error_key = "config"


class ShapeError(ClinicalLMError, ValueError):
    error_key = "shape"

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(
                str(tuple(s)) for s in shapes
            )
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class VocabularyError(ClinicalLMError, ValueError):
    error_key = "vocabulary"


class NumericalError(ClinicalLMError, ArithmeticError):
    """Non-finite loss or gradient. ``step`` is set when raised in a loop."""

    error_key = "numerical"

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class CheckpointError(ClinicalLMError, ValueError):
    error_key = "checkpoint"


class SchemaError(ClinicalLMError, ValueError):
    error_key = "schema"


class UndefinedMetricError(ClinicalLMError, ValueError):
    error_key = "undefined_metric"


class EmptyCorpusError(ClinicalLMError, ValueError):
    error_key = "empty_corpus"


class FabricError(ClinicalLMError, RuntimeError):
    """A collective failed (timeout, broken peer). ``layer`` is -1 outside
    transformer layers."""

    error_key = "fabric"

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class FabricDesyncError(FabricError):
    error_key = "fabric_desync"


class ReplicaDivergenceError(ClinicalLMError, RuntimeError):
    error_key = "divergence"


def classify_exception(exc: BaseException) -> str:
    """
    Map an exception to an error key for the CLI's one-line error report.
    Foreign exceptions map by builtin type; anything else is ``unknown``.
    """
    if isinstance(exc, ClinicalLMError):
        return exc.error_key
    if isinstance(exc, FileNotFoundError):
        return "not_found"
    if isinstance(exc, PermissionError):
        return "permission_denied"
    if isinstance(exc, (TimeoutError, ConnectionError)):
        return "fabric"
    if isinstance(exc, ValueError):
        return "invalid_value"
    return "unknown"
