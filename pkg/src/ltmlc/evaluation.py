"""Average precision and per-class reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset, PredictionMatrix, ValidationError, format_score


def average_precision(scores, labels) -> float:
    """Step-integrated AP with tied scores entering the ranking together.

    Thresholds are the distinct score values in descending order.  At each
    threshold, precision and recall are measured over all items scoring at or
    above it, and AP sums ``(R_t - R_{t-1}) * P_t``.  Returns ``nan`` when
    there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError("scores and labels must be equal-length non-empty vectors")
    n_pos = labels.sum()
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    seen = np.arange(1, len(s) + 1, dtype=np.float64)
    # last index of each group of equal scores
    group_end = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_t = tp[group_end]
    precision = tp_t / seen[group_end]
    recall = tp_t / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


@dataclass(frozen=True)
class EvalReport:
    class_names: tuple[str, ...]
    per_class_ap: np.ndarray  # nan marks an undefined AP
    positives: np.ndarray
    mAP: float

    @property
    def excluded(self) -> tuple[str, ...]:
        return tuple(n for n, ap in zip(self.class_names, self.per_class_ap) if math.isnan(ap))

    def to_csv(self) -> str:
        lines = ["class,ap,positives"]
        for name, ap, pos in zip(self.class_names, self.per_class_ap, self.positives):
            ap_text = "undefined" if math.isnan(ap) else format_score(ap)
            lines.append(f"{name},{ap_text},{int(pos)}")
        lines.append(f"mAP,{format_score(self.mAP)}")
        return "\n".join(lines) + "\n"


def _report(names, per_class_ap, positives) -> EvalReport:
    per_class_ap = np.asarray(per_class_ap, dtype=np.float64)
    defined = ~np.isnan(per_class_ap)
    if not defined.any():
        raise ValidationError("no class has any positive example")
    return EvalReport(tuple(names), per_class_ap, np.asarray(positives),
                      float(per_class_ap[defined].mean()))


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.array([average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])])


def mean_average_precision(pm: PredictionMatrix, data: LabeledDataset) -> EvalReport:
    if pm.vocabulary.names != data.vocabulary.names:
        raise ValidationError("prediction and label vocabularies differ")
    if pm.image_ids != data.image_ids:
        raise ValidationError("prediction and label image ids are not aligned")
    return _report(pm.vocabulary.names, per_class_ap(pm.scores, data.labels),
                   data.labels.sum(axis=0))


def map_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """mAP over classes with at least one positive, for raw arrays."""
    aps = per_class_ap(np.asarray(scores), np.asarray(labels))
    defined = ~np.isnan(aps)
    if not defined.any():
        raise ValidationError("no class has any positive example")
    return float(aps[defined].mean())


def prevalence_baseline(data: LabeledDataset) -> EvalReport:
    """Expected AP of an uninformative ranking: each class's positive rate."""
    positives = data.labels.sum(axis=0)
    prevalence = positives / len(data)
    ap = np.where(positives > 0, prevalence, np.nan)
    return _report(data.vocabulary.names, ap, positives)
