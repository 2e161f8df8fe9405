"""Confusion matrix and macro-averaged classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

NUM_CLASSES = 3


def confusion(preds, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ContractError("preds and labels must be equal-length nonempty sequences")
    for name, v in (("prediction", preds), ("label", labels)):
        bad = v[(v < 0) | (v >= num_classes)]
        if bad.size:
            raise ContractError(f"{name} {int(bad[0])} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den != 0)


@dataclass
class MetricReport:
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    precision_per_class: list = field(default_factory=list)
    recall_per_class: list = field(default_factory=list)
    f1_per_class: list = field(default_factory=list)
    count: int = 0
    domain: int = -1

    def tsv(self) -> str:
        cols = [self.domain, self.count, self.accuracy, self.f1, self.sensitivity, self.specificity]
        cols += self.f1_per_class
        return "\t".join(str(c) if isinstance(c, int) else f"{c:.6f}" for c in cols)

    @staticmethod
    def tsv_header() -> str:
        return "\t".join(["domain", "n", "acc", "macro_f1", "sen", "spe", "f1_nc", "f1_mci", "f1_ad"])

    def text(self) -> str:
        return (f"domain {self.domain}  n={self.count}  ACC {100 * self.accuracy:.2f}%  "
                f"F1 {self.f1:.3f}  SEN {self.sensitivity:.3f}  SPE {self.specificity:.3f}")


def metrics(cm: np.ndarray, domain: int = -1) -> MetricReport:
    """Accuracy plus one-vs-rest macro F1 / sensitivity / specificity; 0/0 := 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total < 1:
        raise ContractError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    specificity = _ratio(tn, tn + fp)
    return MetricReport(
        accuracy=float(tp.sum() / total),
        f1=float(f1.mean()),
        sensitivity=float(recall.mean()),
        specificity=float(specificity.mean()),
        precision_per_class=precision.tolist(),
        recall_per_class=recall.tolist(),
        f1_per_class=f1.tolist(),
        count=total,
        domain=domain,
    )
