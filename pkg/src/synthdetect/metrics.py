"""Evaluation metrics for binary detection on raw logits.

AUC is the Mann-Whitney statistic (ties get half credit), computed from
ranks. The ROC curve sweeps every distinct logit as a threshold, with the
predict-nothing and predict-everything endpoints attached, so its trapezoid
area equals the rank AUC. EER interpolates the crossing of the false
positive and false negative rates along the curve. Classification metrics
threshold logits at a fixed cut (default 0) and macro-average over the two
classes.

The key=value report format and the ROC CSV produced here are parsed back by
:func:`parse_report` and :func:`parse_roc_csv`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .validation import as_binary_labels, as_score_vector

REPORT_KEYS = ("auc", "accuracy", "f1", "precision", "recall", "eer")
ROC_CSV_HEADER = "threshold,fpr,tpr"


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


@dataclass(frozen=True)
class EvalReport:
    """Scalar metrics plus the ROC curve and the threshold that produced them."""

    auc: float
    accuracy: float
    f1: float
    precision: float
    recall: float
    eer: float
    threshold_used: float
    roc_points: tuple[RocPoint, ...]


def _check_two_classes(y: np.ndarray) -> None:
    if not ((y == 1).any() and (y == 0).any()):
        raise ValueError("metrics need at least one real and one fake sample")


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(logits, labels) -> float:
    """Probability a random real sample outscores a random fake one,
    counting ties as half."""
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    _check_two_classes(y)
    n_real = int((y == 1).sum())
    n_fake = y.size - n_real
    ranks = _average_ranks(h)
    real_rank_sum = float(ranks[y == 1].sum())
    return (real_rank_sum - n_real * (n_real + 1) / 2.0) / (n_real * n_fake)


def roc_curve(logits, labels) -> list[RocPoint]:
    """ROC points from the all-negative to the all-positive operating point.

    Predictions are ``logit >= threshold``; one point per distinct logit,
    plus (+inf, fpr 0, tpr 0) and (-inf, fpr 1, tpr 1) endpoints. Both rates
    are nondecreasing along the returned list.
    """
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    _check_two_classes(y)
    n_real = int((y == 1).sum())
    n_fake = y.size - n_real
    order = np.argsort(-h, kind="stable")
    h_sorted = h[order]
    y_sorted = y[order]
    points = [RocPoint(fpr=0.0, tpr=0.0, threshold=float("inf"))]
    tp = fp = 0
    i = 0
    while i < h_sorted.size:
        j = i
        while j + 1 < h_sorted.size and h_sorted[j + 1] == h_sorted[i]:
            j += 1
        group = y_sorted[i : j + 1]
        tp += int((group == 1).sum())
        fp += int((group == 0).sum())
        points.append(RocPoint(fpr=fp / n_fake, tpr=tp / n_real, threshold=float(h_sorted[i])))
        i = j + 1
    points.append(RocPoint(fpr=1.0, tpr=1.0, threshold=float("-inf")))
    return points


def roc_area(points: Sequence[RocPoint]) -> float:
    """Trapezoid area under a ROC point list."""
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.trapezoid(tpr, fpr))


def eer(logits, labels) -> float:
    """Equal error rate: where the false positive rate meets the false
    negative rate, linearly interpolated between adjacent ROC points."""
    points = roc_curve(logits, labels)
    # d = fpr - fnr is nondecreasing from -1 to +1 along the curve.
    prev = points[0]
    for point in points[1:]:
        d = point.fpr - (1.0 - point.tpr)
        if d >= 0.0:
            d_prev = prev.fpr - (1.0 - prev.tpr)
            if d == d_prev:
                return point.fpr
            s = -d_prev / (d - d_prev)
            return prev.fpr + s * (point.fpr - prev.fpr)
        prev = point
    return 1.0  # unreachable: the final point always has d = 1


def classification_report(logits, labels, threshold: float = 0.0) -> EvalReport:
    """All metrics at once; precision/recall/F1 are macro averages over the
    real and fake classes, with empty denominators scoring 0."""
    h = as_score_vector(logits, name="logits")
    y = as_binary_labels(labels, n=h.size)
    _check_two_classes(y)
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    pred = h > threshold
    actual = y == 1
    tp = int((pred & actual).sum())
    fp = int((pred & ~actual).sum())
    fn = int((~pred & actual).sum())
    tn = int((~pred & ~actual).sum())

    def _prf(tp_c: int, fp_c: int, fn_c: int) -> tuple[float, float, float]:
        precision = tp_c / (tp_c + fp_c) if tp_c + fp_c else 0.0
        recall = tp_c / (tp_c + fn_c) if tp_c + fn_c else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    p_real, r_real, f_real = _prf(tp, fp, fn)
    p_fake, r_fake, f_fake = _prf(tn, fn, fp)
    return EvalReport(
        auc=auc_score(h, y),
        accuracy=(tp + tn) / y.size,
        f1=(f_real + f_fake) / 2.0,
        precision=(p_real + p_fake) / 2.0,
        recall=(r_real + r_fake) / 2.0,
        eer=eer(h, y),
        threshold_used=float(threshold),
        roc_points=tuple(roc_curve(h, y)),
    )


def format_report(report: EvalReport) -> str:
    """Render the six scalar metrics as ``key=value`` lines."""
    values = {
        "auc": report.auc,
        "accuracy": report.accuracy,
        "f1": report.f1,
        "precision": report.precision,
        "recall": report.recall,
        "eer": report.eer,
    }
    return "\n".join(f"{key}={values[key]!r}" for key in REPORT_KEYS) + "\n"


def parse_report(text: str) -> dict[str, float]:
    """Parse a key=value report back into a dict with exactly the six keys."""
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in REPORT_KEYS:
            raise ValueError(f"line {lineno}: unknown report key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate report key {key!r}")
        values[key] = float(value)
    missing = [k for k in REPORT_KEYS if k not in values]
    if missing:
        raise ValueError(f"report is missing keys {missing}")
    return values


def roc_to_csv(points: Iterable[RocPoint]) -> str:
    """CSV with header ``threshold,fpr,tpr``, one row per ROC point."""
    lines = [ROC_CSV_HEADER]
    for p in points:
        lines.append(f"{p.threshold!r},{p.fpr!r},{p.tpr!r}")
    return "\n".join(lines) + "\n"


def parse_roc_csv(text: str) -> list[RocPoint]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != ROC_CSV_HEADER:
        raise ValueError(f"ROC csv must start with header {ROC_CSV_HEADER!r}")
    points = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields, got {len(fields)}")
        threshold, fpr, tpr = (float(f) for f in fields)
        points.append(RocPoint(fpr=fpr, tpr=tpr, threshold=threshold))
    if not points:
        raise ValueError("ROC csv has no data rows")
    return points
