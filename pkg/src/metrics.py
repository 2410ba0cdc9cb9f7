"""
Classification Metrics

MCC (binary and the multiclass R_K form), F1 / macro F1, top-1 accuracy and
AUROC, plus the MetricReport that carries them to the command line.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from src.errors import ConfigError, DataFormatError, PreconditionError

logger = logging.getLogger(__name__)

METRICS = ("mcc", "f1", "top1", "auroc")


class BinaryCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_matrix(cls, confusion: np.ndarray) -> "BinaryCounts":
        """From a 2x2 matrix with true classes on rows and class 1 positive."""
        confusion = np.asarray(confusion)
        if confusion.shape != (2, 2):
            raise PreconditionError(f"Binary metrics need a 2x2 confusion matrix, got {confusion.shape}")
        return cls(tp=int(confusion[1, 1]), fp=int(confusion[0, 1]), fn=int(confusion[1, 0]), tn=int(confusion[0, 0]))


ConfusionLike = Union[BinaryCounts, np.ndarray, Sequence[Sequence[int]]]


def _binary(confusion: ConfusionLike) -> BinaryCounts:
    counts = confusion if isinstance(confusion, BinaryCounts) else BinaryCounts.from_matrix(confusion)
    if sum(counts) == 0:
        raise PreconditionError("Confusion matrix is empty")
    return counts


def _square(confusion: ConfusionLike) -> np.ndarray:
    if isinstance(confusion, BinaryCounts):
        confusion = [[confusion.tn, confusion.fp], [confusion.fn, confusion.tp]]
    matrix = np.asarray(confusion, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
        raise PreconditionError(f"Confusion matrix must be square, got shape {matrix.shape}")
    if matrix.sum() == 0:
        raise PreconditionError("Confusion matrix is empty")
    return matrix


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """C x C counts with true classes on rows and predictions on columns."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise PreconditionError(f"{preds.size} predictions for {labels.size} labels")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, preds), 1)
    return matrix


def mcc_binary(confusion: ConfusionLike) -> float:
    """
    Matthews correlation for two classes.

    (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)); 0 when the
    denominator vanishes.
    """
    tp, fp, fn, tn = (float(v) for v in _binary(confusion))
    denominator = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denominator == 0:
        return 0.0
    return (tp * tn - fp * fn) / float(np.sqrt(denominator))


def mcc_multiclass(confusion: ConfusionLike) -> float:
    """
    Generalized R_K correlation over a C x C confusion matrix.

    (c*s - sum_k p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2)) with c
    the trace, s the total, t the true-class and p the predicted-class
    totals; 0 when the denominator vanishes.
    """
    matrix = _square(confusion)
    true_totals, pred_totals = matrix.sum(axis=1), matrix.sum(axis=0)
    correct, total = np.trace(matrix), matrix.sum()
    denominator = (total ** 2 - pred_totals @ pred_totals) * (total ** 2 - true_totals @ true_totals)
    if denominator == 0:
        return 0.0
    return float((correct * total - pred_totals @ true_totals) / np.sqrt(denominator))


def f1_binary(confusion: ConfusionLike) -> float:
    """Positive-class F1, 2TP / (2TP + FP + FN); 0 when the denominator vanishes."""
    tp, fp, fn, _ = _binary(confusion)
    denominator = 2 * tp + fp + fn
    return 0.0 if denominator == 0 else 2.0 * tp / denominator


def per_class_f1(confusion: ConfusionLike) -> np.ndarray:
    matrix = _square(confusion)
    tp = np.diag(matrix)
    denominator = matrix.sum(axis=0) + matrix.sum(axis=1)
    return np.divide(2.0 * tp, denominator, out=np.zeros_like(tp), where=denominator > 0)


def macro_f1(confusion: ConfusionLike) -> float:
    """Unweighted mean of the per-class F1 scores."""
    return float(per_class_f1(confusion).mean())


def argmax_predictions(scores: np.ndarray) -> np.ndarray:
    """Predicted class per row; ties go to the lowest index."""
    return np.argmax(np.asarray(scores), axis=-1)


def top1(preds: Sequence[Any], labels: Sequence[int]) -> float:
    """
    Exact-match rate.

    Args:
        preds: Predicted indices [n], or scores [n, C] reduced by argmax
        labels: True indices [n]

    Returns:
        Fraction of correct predictions
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels).reshape(-1)
    if preds.ndim == 2:
        preds = argmax_predictions(preds)
    preds = preds.reshape(-1)
    if labels.size == 0:
        raise PreconditionError("top1 needs at least one example")
    if preds.shape != labels.shape:
        raise PreconditionError(f"{preds.size} predictions for {labels.size} labels")
    return float(np.mean(preds == labels))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve in Mann-Whitney form with midrank ties.

    (sum of positive ranks - n_pos (n_pos + 1) / 2) / (n_pos * n_neg)

    Args:
        scores: Higher means more likely positive
        labels: 0/1 labels with both classes present

    Returns:
        AUROC in [0, 1]
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise PreconditionError(f"{scores.size} scores for {labels.size} labels")
    positive = labels == 1
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise PreconditionError("AUROC needs both positive and negative examples")
    ranks = stats.rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_ovr_macro(scores: np.ndarray, labels: Sequence[int]) -> float:
    """One-vs-rest AUROC averaged over the classes that have both outcomes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    values = []
    for k in range(scores.shape[-1]):
        one_vs_rest = (labels == k).astype(np.int64)
        if 0 < one_vs_rest.sum() < one_vs_rest.size:
            values.append(auroc(scores[:, k], one_vs_rest))
    if not values:
        raise PreconditionError("No class has both positive and negative examples")
    return float(np.mean(values))


def multilabel_auroc(scores: np.ndarray, labels: np.ndarray) -> List[float]:
    """Per-label AUROC; labels lacking either outcome get NaN."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise PreconditionError(f"Multilabel AUROC needs matching [n, L] arrays, got {scores.shape}, {labels.shape}")
    per_label = []
    for column in range(labels.shape[1]):
        outcomes = labels[:, column]
        if 0 < outcomes.sum() < outcomes.size:
            per_label.append(auroc(scores[:, column], outcomes))
        else:
            per_label.append(float("nan"))
    return per_label


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------


def _format_value(value: float) -> str:
    return repr(float(value))


@dataclass
class MetricReport:
    """Evaluation results with a stable ``key=value`` text form."""

    n_examples: int = 0
    mcc: Optional[float] = None
    f1: Optional[float] = None
    top1: Optional[float] = None
    auroc: Optional[float] = None
    confusion: Optional[np.ndarray] = None
    per_label_auroc: Optional[List[float]] = None
    errors: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)

    def value(self, name: str) -> Optional[float]:
        if name in METRICS:
            return getattr(self, name)
        return self.extra.get(name)

    def to_items(self, prefix: str = "") -> Dict[str, str]:
        items: Dict[str, str] = {"n_examples": str(self.n_examples)}
        for name in METRICS:
            value = getattr(self, name)
            if value is not None:
                items[name] = _format_value(value)
        if self.confusion is not None:
            items["confusion"] = ";".join(",".join(str(int(v)) for v in row) for row in self.confusion)
        if self.per_label_auroc is not None:
            items["per_label_auroc"] = ",".join(_format_value(v) for v in self.per_label_auroc)
        for name, message in self.errors.items():
            items[f"error.{name}"] = " ".join(message.split())
        for name, value in self.extra.items():
            items[name] = _format_value(value)
        return {f"{prefix}{key}": value for key, value in items.items()}

    def to_text(self, prefix: str = "") -> str:
        """Sorted ``key=value`` lines."""
        items = self.to_items(prefix)
        return "".join(f"{key}={items[key]}\n" for key in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        report = cls()
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if "=" not in line:
                raise DataFormatError(f"Metric report line {line_number} is not key=value: {line!r}")
            key, value = line.split("=", 1)
            if key == "n_examples":
                report.n_examples = int(value)
            elif key in METRICS:
                setattr(report, key, float(value))
            elif key == "confusion":
                report.confusion = np.array([[int(v) for v in row.split(",")] for row in value.split(";")])
            elif key == "per_label_auroc":
                report.per_label_auroc = [float(v) for v in value.split(",")]
            elif key.startswith("error."):
                report.errors[key[len("error."):]] = value
            else:
                report.extra[key] = float(value)
        return report


def combine_reports(reports: Dict[str, MetricReport]) -> str:
    """Several reports side by side, keys prefixed with ``<name>.``."""
    items: Dict[str, str] = {}
    for name, report in reports.items():
        items.update(report.to_items(prefix=f"{name}."))
    return "".join(f"{key}={items[key]}\n" for key in sorted(items))


def check_metric_names(metrics: Iterable[str]) -> List[str]:
    names = list(metrics)
    unknown = [name for name in names if name not in METRICS]
    if unknown:
        raise ConfigError(f"Unknown metrics {unknown}; expected names from {METRICS}")
    return names


def build_report(scores: np.ndarray, labels: np.ndarray, n_classes: int, task: str,
                 metrics: Sequence[str]) -> MetricReport:
    """
    Score a set of predictions.

    Binary tasks report positive-class F1 and binary MCC; multiclass tasks
    (and per-position token tasks) report macro F1, R_K MCC and one-vs-rest
    macro AUROC. Multilabel tasks threshold logits at 0 for MCC/F1/top1 over
    all (example, label) pairs and report per-label AUROC with its macro
    average. A metric whose precondition fails is recorded in ``errors``.

    Args:
        scores: Logits [n, C], or [n, l, C] for token tasks
        labels: Matching class indices (or 0/1 matrix for multilabel)
        n_classes: Number of classes or labels
        task: 'sequence', 'token' or 'multilabel'
        metrics: Metric names to compute (may be empty)

    Returns:
        MetricReport
    """
    metrics = check_metric_names(metrics)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    report = MetricReport(n_examples=int(labels.shape[0]))

    if task == "multilabel":
        flat_labels = labels.reshape(-1)
        decisions = (scores.reshape(-1) > 0).astype(np.int64)
        confusion = confusion_matrix(decisions, flat_labels, 2)
        probabilities = None
    else:
        flat_scores = scores.reshape(-1, n_classes)
        flat_labels = labels.reshape(-1)
        decisions = argmax_predictions(flat_scores)
        confusion = confusion_matrix(decisions, flat_labels, n_classes)
        probabilities = special.softmax(flat_scores, axis=-1)
    report.confusion = confusion
    binary = confusion.shape == (2, 2)

    def compute(name: str) -> Optional[float]:
        if name == "mcc":
            return mcc_binary(confusion) if binary else mcc_multiclass(confusion)
        if name == "f1":
            return f1_binary(confusion) if binary else macro_f1(confusion)
        if name == "top1":
            return top1(decisions, flat_labels)
        if task == "multilabel":
            report.per_label_auroc = multilabel_auroc(scores, labels)
            defined = [v for v in report.per_label_auroc if not np.isnan(v)]
            if not defined:
                raise PreconditionError("No label has both positive and negative examples")
            return float(np.mean(defined))
        if n_classes == 2:
            return auroc(flat_scores[:, 1] - flat_scores[:, 0], flat_labels)
        return auroc_ovr_macro(probabilities, flat_labels)

    for name in metrics:
        try:
            setattr(report, name, compute(name))
        except PreconditionError as exc:
            report.errors[name] = str(exc)
            logger.warning("Metric %s not computed: %s", name, exc)
    return report
