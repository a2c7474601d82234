"""Exception hierarchy shared by every mmgbench module.

`ValidationError` covers bad inputs (CLI exit 1); `PipelineError` covers
failures while running a pipeline (CLI exit 2).
"""

from __future__ import annotations

from pathlib import Path


class MmgbenchError(Exception):
    pass


class ValidationError(MmgbenchError, ValueError):
    pass


class PipelineError(MmgbenchError, RuntimeError):
    pass


# --- graph-core -----------------------------------------------------------


class MalformedRecord(ValidationError):
    def __init__(self, path: Path | str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line
        self.reason = reason


class MissingEmbedding(ValidationError):
    def __init__(self, node_id: int, modality: str, detail: str = "") -> None:
        message = f"node {node_id} has no valid {modality} embedding row"
        super().__init__(f"{message}: {detail}" if detail else message)
        self.node_id = node_id
        self.modality = modality


class UnknownLabel(ValidationError):
    pass


class MalformedEmbeddingFile(ValidationError):
    pass


class BadRatios(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


# --- numerics -------------------------------------------------------------


class ShapeMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NonFiniteValue(PipelineError, ValueError):
    pass


class NonFiniteGradient(NonFiniteValue):
    pass


# --- encoders / models ----------------------------------------------------


class ModalityUnavailable(ValidationError):
    pass


class DegenerateBatch(ValidationError):
    pass


class EmptyTrainSet(PipelineError):
    pass


# --- vlm-client -----------------------------------------------------------


class VlmClientError(PipelineError):
    pass


class VlmTimeout(VlmClientError):
    pass


class RateLimited(VlmClientError):
    pass


class EndpointError(VlmClientError):
    pass


class MalformedResponse(VlmClientError):
    pass


class ImageUnreadable(VlmClientError):
    pass


# --- vlm-pipelines --------------------------------------------------------


class UnboundSlot(ValidationError):
    pass


class UnknownDomain(ValidationError):
    pass


class NoImage(PipelineError):
    pass


class MissingImage(PipelineError):
    pass


class MissingDescription(PipelineError):
    pass


class EmptyInput(ValidationError):
    pass


class LabelParseError(PipelineError):
    pass


class Ambiguous(LabelParseError):
    pass


class Unparseable(LabelParseError):
    pass


# --- harness --------------------------------------------------------------


class LengthMismatch(ValidationError):
    pass


class EmptyEvaluation(ValidationError):
    pass


class MissingGroup(ValidationError):
    pass
