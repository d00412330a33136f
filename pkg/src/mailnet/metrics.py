"""Classification metrics: accuracy, macro F1, macro one-vs-rest AUC, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, DimensionError, NumericError


class UndefinedMetricError(NumericError):
    """A metric has no value for the given labels (e.g. AUC with one class present)."""


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    auc: float | None


@dataclass
class MetricsReport:
    acc: float
    macro_f1: float
    macro_auc: float
    per_class: list[ClassMetrics]
    confusion: np.ndarray

    def to_text(self, prefix: str = "") -> str:
        """``key = value`` lines, one fact per line."""
        lines = [f"{prefix}acc = {self.acc!r}", f"{prefix}macro_f1 = {self.macro_f1!r}",
                 f"{prefix}macro_auc = {self.macro_auc!r}", f"{prefix}n = {int(self.confusion.sum())}"]
        for k, c in enumerate(self.per_class):
            auc = "nan" if c.auc is None else repr(c.auc)
            lines.append(f"{prefix}class.{k} = precision={c.precision!r} recall={c.recall!r} "
                         f"f1={c.f1!r} support={c.support} auc={auc}")
        for k, row in enumerate(self.confusion):
            lines.append(f"{prefix}confusion.{k} = " + " ".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def ovr_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Probability a random positive outscores a random negative, ties counting one half."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def compute_metrics(logits, labels) -> MetricsReport:
    """Metrics for ``(n, K)`` logits against ``n`` integer labels.

    Predictions are the arg-max.  Macro F1 averages over all ``K`` classes, an
    empty class scoring 0.  AUC ranks softmax probabilities one class against
    the rest and averages over the classes present in ``labels``; it needs at
    least two of them.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.ndim != 1 or z.shape[0] != y.shape[0]:
        raise DimensionError(f"logits {z.shape} and labels {y.shape} do not describe the same samples")
    n, k = z.shape
    if n == 0:
        raise UndefinedMetricError("metrics need at least one sample")
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    pred = z.argmax(axis=1)
    cm = confusion_matrix(pred, y, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros(k), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(k), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)

    present = np.flatnonzero(support > 0)
    if present.size < 2:
        raise UndefinedMetricError(f"AUC is undefined: only {present.size} class present in labels")
    prob = _softmax(z)
    aucs: list[float | None] = [None] * k
    for c in present:
        aucs[c] = ovr_auc(prob[:, c], y == c)
    per_class = [ClassMetrics(float(precision[c]), float(recall[c]), float(f1[c]), int(support[c]), aucs[c])
                 for c in range(k)]
    return MetricsReport(acc=float(tp.sum() / n), macro_f1=float(f1.mean()),
                         macro_auc=float(np.mean([aucs[c] for c in present])),
                         per_class=per_class, confusion=cm)
