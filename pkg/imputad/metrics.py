"""
Detection metrics: point-wise and point-adjusted precision/recall/F1,
range-aware AUC with buffered continuous labels, and the mean delay until an
anomalous event is first flagged.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from imputad.errors import MetricsError

logger = logging.getLogger(__name__)

MAX_BUFFER = 50


@dataclass(frozen=True)
class EventList:
    """Disjoint, sorted ``(start, end_exclusive)`` anomaly segments."""
    events: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        previous_end = -1
        for start, end in self.events:
            if end <= start or start < previous_end:
                raise MetricsError(f"events must be non-empty, sorted and disjoint: {self.events}")
            previous_end = end

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def lengths(self) -> List[int]:
        return [end - start for start, end in self.events]


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    f1_raw: float
    r_auc: float
    r_auc_roc: float
    add: float
    n_events: int
    precision_raw: float = 0.0
    recall_raw: float = 0.0
    buffer: int = 0
    gap: float = float("nan")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_row(self) -> Dict[str, float]:
        """Columns of the metrics CSV."""
        return {
            "P": self.precision,
            "R": self.recall,
            "F1": self.f1,
            "F1_raw": self.f1_raw,
            "R_AUC_PR": self.r_auc,
            "R_AUC_ROC": self.r_auc_roc,
            "ADD": self.add,
            "GAP": self.gap,
        }


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise MetricsError(f"{name} must be a vector, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise MetricsError(f"{name} must be binary")
    return arr.astype(np.int64)


def _same_length(a: np.ndarray, b: np.ndarray):
    if a.shape[0] != b.shape[0]:
        raise MetricsError(f"length mismatch: {a.shape[0]} predictions vs {b.shape[0]} labels")


def events_from_labels(truth) -> EventList:
    """Maximal runs of ones."""
    labels = _binary(truth, "truth")
    edges = np.diff(np.r_[0, labels, 0])
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    return EventList(tuple((int(s), int(e)) for s, e in zip(starts, ends)))


def point_adjust(pred, truth) -> np.ndarray:
    """Credit a whole event as detected when any of its timestamps is flagged."""
    pred = _binary(pred, "pred")
    truth = _binary(truth, "truth")
    _same_length(pred, truth)
    adjusted = pred.copy()
    for start, end in events_from_labels(truth):
        if adjusted[start:end].any():
            adjusted[start:end] = 1
    return adjusted


def prf1(pred, truth, adjust: bool = True) -> Tuple[float, float, float]:
    """Precision, recall and F1 over timestamps; precision is 0 with no predicted positives."""
    pred = _binary(pred, "pred")
    truth = _binary(truth, "truth")
    _same_length(pred, truth)
    if adjust:
        pred = point_adjust(pred, truth)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & (1 - truth)))
    fn = int(np.sum((1 - pred) & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def default_buffer(events: EventList) -> int:
    """Half the mean event length, capped."""
    if not len(events):
        return 0
    return min(MAX_BUFFER, int(np.mean(events.lengths) / 2))


def continuous_labels(truth, buffer: int) -> np.ndarray:
    """
    Soften binary labels: 1 inside events, ramping down as ``1 - d / (buffer + 1)``
    at distance ``d <= buffer`` outside them. Overlapping ramps take the maximum.
    """
    if buffer < 0:
        raise MetricsError(f"buffer must be >= 0, got {buffer}")
    labels = _binary(truth, "truth")
    cont = labels.astype(np.float64)
    length = cont.shape[0]
    for start, end in events_from_labels(labels):
        for d in range(1, buffer + 1):
            weight = 1.0 - d / (buffer + 1)
            if start - d >= 0:
                cont[start - d] = max(cont[start - d], weight)
            if end - 1 + d < length:
                cont[end - 1 + d] = max(cont[end - 1 + d], weight)
    return cont


def _sweep(score: np.ndarray, cont: np.ndarray):
    """Cumulative positive/negative mass and predicted count at each unique threshold, highest first."""
    order = np.argsort(-score, kind="mergesort")
    sorted_score = score[order]
    tp = np.cumsum(cont[order])
    fp = np.cumsum(1.0 - cont[order])
    # last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(sorted_score))[0], sorted_score.size - 1]
    return tp[last], fp[last], last + 1.0


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def range_auc(score, truth, buffer: Optional[int] = None, kind: str = "pr") -> float:
    """
    Threshold-free area with buffered continuous labels.

    Args:
        score: Anomaly score per timestamp (higher = more anomalous).
        truth: Binary ground truth.
        buffer: Ramp length around events; defaults to :func:`default_buffer`.
        kind: ``"pr"`` for precision over recall, ``"roc"`` for TPR over FPR.
    """
    score = np.asarray(score, dtype=np.float64)
    labels = _binary(truth, "truth")
    _same_length(score, labels)
    if buffer is None:
        buffer = default_buffer(events_from_labels(labels))
    cont = continuous_labels(labels, buffer)
    positives = cont.sum()
    negatives = cont.size - positives
    if positives <= 0:
        raise MetricsError("range AUC is undefined without anomalous timestamps")
    tp, fp, predicted = _sweep(score, cont)

    if kind == "roc":
        if negatives <= 0:
            raise MetricsError("range ROC AUC is undefined without normal timestamps")
        tpr = np.r_[0.0, tp / positives]
        fpr = np.r_[0.0, fp / negatives]
        return _trapezoid(tpr, fpr)
    if kind == "pr":
        recall = tp / positives
        precision = tp / predicted
        recall = np.r_[0.0, recall]
        precision = np.r_[precision[0], precision]
        return _trapezoid(precision, recall)
    raise MetricsError(f"unknown range AUC kind '{kind}', expected 'pr' or 'roc'")


def add_metric(pred, events: EventList) -> float:
    """
    Mean delay between each event start and its first flagged timestamp inside
    the event; an event never flagged counts its full length.
    """
    pred = _binary(pred, "pred")
    if not len(events):
        raise MetricsError("detection delay is undefined without anomalous events")
    if events.events[-1][1] > pred.shape[0]:
        raise MetricsError(f"events reach timestamp {events.events[-1][1]}, predictions cover {pred.shape[0]}")
    delays = []
    for start, end in events:
        hits = np.nonzero(pred[start:end])[0]
        delays.append(float(hits[0]) if hits.size else float(end - start))
    return float(np.mean(delays))


def error_gap(score, truth) -> float:
    """Mean score on anomalous timestamps minus mean score on normal ones."""
    score = np.asarray(score, dtype=np.float64)
    labels = _binary(truth, "truth")
    _same_length(score, labels)
    if labels.all() or not labels.any():
        raise MetricsError("error gap needs both normal and anomalous timestamps")
    return float(score[labels == 1].mean() - score[labels == 0].mean())


def _or_nan(name: str, compute) -> float:
    try:
        return compute()
    except MetricsError as exc:
        logger.warning(f"{name} unavailable: {exc}", extra={'event_type': 'metrics_undefined', 'metric': name})
        return float("nan")


def evaluate_all(pred, truth, score=None, buffer: Optional[int] = None) -> MetricsReport:
    """
    Every metric for one series. ``score`` defaults to the binary predictions.
    Each metric undefined for the given truth (no events, no normal timestamps)
    is reported as NaN on its own; the others are still computed.
    """
    pred = _binary(pred, "pred")
    truth = _binary(truth, "truth")
    _same_length(pred, truth)
    score = pred.astype(np.float64) if score is None else np.asarray(score, dtype=np.float64)
    _same_length(score, truth)
    events = events_from_labels(truth)
    buffer = default_buffer(events) if buffer is None else int(buffer)

    precision, recall, f1 = prf1(pred, truth, adjust=True)
    precision_raw, recall_raw, f1_raw = prf1(pred, truth, adjust=False)

    report = MetricsReport(
        precision=precision, recall=recall, f1=f1, f1_raw=f1_raw,
        r_auc=_or_nan("R_AUC_PR", lambda: range_auc(score, truth, buffer, kind="pr")),
        r_auc_roc=_or_nan("R_AUC_ROC", lambda: range_auc(score, truth, buffer, kind="roc")),
        add=_or_nan("ADD", lambda: add_metric(pred, events)),
        n_events=len(events),
        precision_raw=precision_raw, recall_raw=recall_raw, buffer=buffer,
        gap=_or_nan("GAP", lambda: error_gap(score, truth)),
    )
    logger.info(
        f"F1={report.f1:.4f} (raw {report.f1_raw:.4f}) R-AUC-PR={report.r_auc:.4f} ADD={report.add:.2f}",
        extra={'event_type': 'metrics_computed', **report.to_row(), 'n_events': report.n_events},
    )
    return report
