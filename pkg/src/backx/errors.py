"""Error taxonomy shared across the pipeline, plus CLI exit codes."""
from __future__ import annotations


class BackxError(Exception):
    """Base class for all library errors."""


class InputError(BackxError, ValueError):
    """Malformed caller input (shapes, ranges, empty collections)."""


class InputShapeError(InputError):
    """Tensor shape does not match what the operation requires."""


class DomainError(InputError):
    """Scalar parameter outside its documented domain."""


class CapabilityError(BackxError):
    """The model handle cannot support the requested operation."""


class LayerLookupError(BackxError, LookupError):
    """Named layer does not exist in the model."""


class TrainingFailure(BackxError):
    """Training diverged; carries the epoch where loss went non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class EmptyPoisonError(InputError):
    """Poisoning rate floors to zero samples; a silent no-op would invalidate ASR."""


class UndefinedMetricError(BackxError):
    """Metric has no meaning for this input (e.g. trigger recall on all-ones masks)."""


class IngestionError(BackxError):
    """Dataset or artifact on disk is missing or corrupt."""


class EvaluationError(BackxError):
    """Evaluation cannot proceed (empty eligible set, missing reports)."""


class GateFailure(BackxError):
    """Trojan verification gate failed; the run must not produce metric reports."""

    def __init__(self, reasons: list[str]):
        self.reasons = list(reasons)
        super().__init__("; ".join(self.reasons) or "gate failed")


EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GATE = 2
EXIT_INGESTION = 3
EXIT_EVALUATION = 4
