"""Accuracy, density, confusion matrices, and the map-level accuracy rule.

Accuracy scores only bacterial-true rows (background rows are excluded);
density is the fraction of predictions that land on bacterial classes.
Map accuracy follows the correct/(crosses + correct) rule with a strict
probability threshold: cells at exactly the threshold count as undetermined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassRegistry
from .errors import DomainError, ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class
    registry: ClassRegistry

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        n = len(self.registry)
        if counts.shape != (n, n):
            raise ShapeError(f"confusion matrix shape {counts.shape}, expected ({n}, {n})")
        if (counts < 0).any():
            raise ShapeError("confusion counts must be non-negative")

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(truths, predictions, registry: ClassRegistry) -> ConfusionMatrix:
    truths = np.asarray(truths, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truths.shape != predictions.shape:
        raise ShapeError("truth and prediction lists differ in length")
    n = len(registry)
    if len(truths) and (
        truths.min() < 0 or truths.max() >= n
        or predictions.min() < 0 or predictions.max() >= n
    ):
        raise DomainError("class index outside registry")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    return ConfusionMatrix(counts, registry)


def accuracy(cm: ConfusionMatrix) -> float:
    """Correct bacterial classifications over all bacterial-true examples."""
    rows = cm.registry.bacterial_indices()
    total = int(cm.counts[rows, :].sum())
    if total == 0:
        raise UndefinedMetricError("no bacterial-true examples scored")
    correct = int(cm.counts[rows, rows].sum())
    return correct / total


def density(predictions, registry: ClassRegistry) -> float:
    """Fraction of predictions assigned to bacterial-kind classes."""
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.size == 0:
        raise UndefinedMetricError("density of an empty prediction list")
    if predictions.min() < 0 or predictions.max() >= len(registry):
        raise DomainError("class index outside registry")
    bacterial = np.isin(predictions, np.asarray(registry.bacterial_indices()))
    return float(bacterial.mean())


def map_accuracy(pmap, true_class, threshold=0.5) -> float:
    """correct / (crosses + correct) over a prediction map.

    correct: cells whose true-class probability exceeds the threshold.
    crosses: cells where some wrong non-background class exceeds it.
    Everything else is undetermined and excluded.
    """
    probs = pmap.probabilities  # [rows, cols, n_classes]
    registry = pmap.registry
    if not 0 <= true_class < len(registry):
        raise DomainError("true_class outside registry")
    flat = probs.reshape(-1, probs.shape[-1])
    correct = flat[:, true_class] > threshold
    wrong = np.ones(flat.shape[1], dtype=bool)
    wrong[true_class] = False
    wrong[registry.background_indices()] = False
    if wrong.any():
        crosses = (flat[:, wrong].max(axis=1) > threshold) & ~correct
    else:
        crosses = np.zeros(len(flat), dtype=bool)
    denom = int(correct.sum()) + int(crosses.sum())
    if denom == 0:
        raise UndefinedMetricError("no cell probability exceeds the threshold")
    return int(correct.sum()) / denom


def per_class_precision_recall(cm: ConfusionMatrix):
    """{"class": {"precision": p|None, "recall": r|None}} (None when undefined)."""
    out = {}
    counts = cm.counts
    for i, name in enumerate(cm.registry.names):
        col = int(counts[:, i].sum())
        row = int(counts[i, :].sum())
        diag = int(counts[i, i])
        out[name] = {
            "precision": diag / col if col else None,
            "recall": diag / row if row else None,
        }
    return out
