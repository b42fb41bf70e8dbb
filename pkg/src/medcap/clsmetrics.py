"""Classification concordance metrics over (ground truth, prediction) pairs.

Conventions: predictions that are absent or outside the vocabulary are
"unparseable" - they count as errors for accuracy and against their true
class's recall, but never as false positives for any class. Per-class
metrics with a zero denominator are 0, and classes with zero support are
excluded from the macro averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .datamodel import CanonicalLabel
from .errors import EmptyInput, InputError


@dataclass(frozen=True)
class ConfusionMatrix:
    vocabulary: tuple[str, ...]
    counts: np.ndarray  # square, indexed (true, predicted)
    unparseable_by_class: np.ndarray  # per true class

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        unparseable = np.asarray(self.unparseable_by_class, dtype=np.int64)
        size = len(self.vocabulary)
        if counts.shape != (size, size):
            raise InputError(f"counts must be {size}x{size}, got {counts.shape}")
        if unparseable.shape != (size,):
            raise InputError("unparseable_by_class must have one entry per class")
        if (counts < 0).any() or (unparseable < 0).any():
            raise InputError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "unparseable_by_class", unparseable)

    @property
    def unparseable_count(self) -> int:
        return int(self.unparseable_by_class.sum())

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.unparseable_count


@dataclass(frozen=True)
class PerClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    dataset: str
    model: str
    n: int
    accuracy: float
    balanced_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: Mapping[str, PerClassMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "n": self.n,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                label: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}
                for label, m in self.per_class.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ClassificationReport":
        return cls(
            dataset=payload["dataset"],
            model=payload["model"],
            n=payload["n"],
            accuracy=payload["accuracy"],
            balanced_accuracy=payload["balanced_accuracy"],
            macro_precision=payload["macro_precision"],
            macro_recall=payload["macro_recall"],
            macro_f1=payload["macro_f1"],
            per_class={
                label: PerClassMetrics(m["precision"], m["recall"], m["f1"], m["support"])
                for label, m in payload["per_class"].items()
            },
        )


def build_confusion(
    pairs: Iterable[tuple[CanonicalLabel, Optional[CanonicalLabel]]],
    vocabulary: Sequence[str],
) -> ConfusionMatrix:
    """Tally (truth, prediction) pairs into a confusion matrix.

    ``prediction`` may be None (unparseable model output). Raises
    InputError if a truth label falls outside the vocabulary.
    """
    vocabulary = tuple(vocabulary)
    index = {label: i for i, label in enumerate(vocabulary)}
    counts = np.zeros((len(vocabulary), len(vocabulary)), dtype=np.int64)
    unparseable = np.zeros(len(vocabulary), dtype=np.int64)
    for truth, prediction in pairs:
        if truth.canonical not in index:
            raise InputError(f"truth label outside vocabulary: {truth.canonical!r}")
        row = index[truth.canonical]
        if prediction is None or prediction.canonical not in index:
            unparseable[row] += 1
        else:
            counts[row, index[prediction.canonical]] += 1
    return ConfusionMatrix(vocabulary=vocabulary, counts=counts, unparseable_by_class=unparseable)


def compute_metrics(matrix: ConfusionMatrix, dataset: str = "", model: str = "") -> ClassificationReport:
    """Accuracy, balanced accuracy, and macro precision/recall/F1.

    Balanced accuracy is the unweighted mean of per-class recall over
    classes with support > 0; unparseable predictions sit in the recall
    denominator of their true class.
    """
    n = matrix.total
    if n == 0:
        raise EmptyInput("confusion matrix has no samples")
    counts = matrix.counts
    true_positives = np.diag(counts).astype(float)
    support = counts.sum(axis=1) + matrix.unparseable_by_class
    predicted = counts.sum(axis=0).astype(float)

    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(support > 0, true_positives / np.maximum(support, 1), 0.0)
        precision = np.where(predicted > 0, true_positives / np.maximum(predicted, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.maximum(denom, 1e-300), 0.0)

    supported = support > 0
    if not supported.any():
        raise EmptyInput("no class has support")

    per_class = {
        label: PerClassMetrics(
            precision=float(precision[i]),
            recall=float(recall[i]),
            f1=float(f1[i]),
            support=int(support[i]),
        )
        for i, label in enumerate(matrix.vocabulary)
    }
    return ClassificationReport(
        dataset=dataset,
        model=model,
        n=n,
        accuracy=float(true_positives.sum() / n),
        balanced_accuracy=float(recall[supported].mean()),
        macro_precision=float(precision[supported].mean()),
        macro_recall=float(recall[supported].mean()),
        macro_f1=float(f1[supported].mean()),
        per_class=per_class,
    )
