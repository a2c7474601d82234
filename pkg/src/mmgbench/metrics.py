"""Evaluation metrics and structure-gain aggregation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from typing import Any

import numpy as np

from mmgbench.errors import EmptyEvaluation, LabelOutOfRange, LengthMismatch, MissingGroup


def _pair(preds: Sequence[int] | np.ndarray, gold: Sequence[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    g = np.asarray(gold, dtype=np.int64).reshape(-1)
    if p.shape != g.shape:
        raise LengthMismatch(f"{p.size} predictions for {g.size} gold labels")
    if p.size == 0:
        raise EmptyEvaluation("cannot score an empty evaluation set")
    return p, g


def accuracy(preds: Sequence[int] | np.ndarray, gold: Sequence[int] | np.ndarray) -> float:
    p, g = _pair(preds, gold)
    return int(np.count_nonzero(p == g)) / p.size


def confusion_matrix(
    preds: Sequence[int] | np.ndarray, gold: Sequence[int] | np.ndarray, num_classes: int
) -> np.ndarray:
    """C x (C+1) counts; the last column holds predictions outside [0, C), e.g. unparseable ones."""
    p, g = _pair(preds, gold)
    if np.any((g < 0) | (g >= num_classes)):
        raise LabelOutOfRange(f"gold labels must lie in [0, {num_classes})")
    matrix = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    columns = np.where((p >= 0) & (p < num_classes), p, num_classes)
    np.add.at(matrix, (g, columns), 1)
    return matrix


def macro_f1(preds: Sequence[int] | np.ndarray, gold: Sequence[int] | np.ndarray, num_classes: int) -> float:
    """Unweighted mean F1 over classes that occur in gold or predictions."""
    matrix = confusion_matrix(preds, gold, num_classes)
    tp = np.diag(matrix[:, :num_classes]).astype(np.float64)
    support = matrix.sum(axis=1).astype(np.float64)
    predicted = matrix[:, :num_classes].sum(axis=0).astype(np.float64)
    present = (support + predicted) > 0
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.mean(f1[present])) if np.any(present) else 0.0


def structure_gain(results: Mapping[str, tuple[float, bool]]) -> float:
    """max accuracy over structure-aware settings minus max over structure-agnostic ones."""
    aware = [acc for acc, is_aware in results.values() if is_aware]
    agnostic = [acc for acc, is_aware in results.values() if not is_aware]
    if not aware:
        raise MissingGroup("no structure-aware results")
    if not agnostic:
        raise MissingGroup("no structure-agnostic results")
    return max(aware) - max(agnostic)


def structure_gain_by_dataset(results: Mapping[str, Mapping[str, Any]]) -> dict[str, float]:
    """``{dataset: {setting: {"accuracy": a, "structure_aware": flag}}}`` -> gain per dataset."""
    gains: dict[str, float] = {}
    for dataset, settings in sorted(results.items()):
        flattened = {
            name: (float(entry["accuracy"]), bool(entry["structure_aware"])) for name, entry in settings.items()
        }
        try:
            gains[dataset] = structure_gain(flattened)
        except MissingGroup as exc:
            raise MissingGroup(f"{dataset}: {exc}") from exc
    return gains


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample std; std is None for a single value."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise EmptyEvaluation("no values to aggregate")
    if array.size == 1:
        return float(array[0]), None
    return float(array.mean()), float(array.std(ddof=1))
