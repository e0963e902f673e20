"""Classification and detection metrics.

Average precision is the all-point interpolated area under the
precision-recall curve: precision is replaced by its running maximum from
the right (the precision envelope) and summed over recall increments.
Ranking ties are broken by sample index (stable sort).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, UsageError


def _nonempty(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UsageError("metric on an empty set")
    return labels


def accuracy(preds, labels) -> float:
    labels = _nonempty(labels)
    return float(np.mean(np.asarray(preds) == labels))


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    k = n_classes or int(max(preds.max(initial=0), labels.max(initial=0)) + 1)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(preds, labels) -> float:
    """Mean per-class recall over classes present in ``labels``."""
    labels = _nonempty(labels)
    preds = np.asarray(preds)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def recall(scores, targets, threshold: float = 0.5) -> float:
    """Micro-averaged multi-label recall ``TP / (TP + FN)`` at ``threshold``."""
    targets = _nonempty(targets).astype(bool)
    pred = np.asarray(scores) >= threshold
    pos = targets.sum()
    if pos == 0:
        raise UsageError("recall undefined without positive labels")
    return float((pred & targets).sum() / pos)


def _ap_from_hits(hits: np.ndarray, n_pos: int) -> float:
    if n_pos == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope[hits.astype(bool)]) / n_pos)


def average_precision(scores, positives) -> float:
    """All-point AP for one class. Needs at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise UsageError(f"scores {scores.shape} and positives {positives.shape} must be matching 1-D arrays")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UsageError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    return _ap_from_hits(positives[order], n_pos)


def per_class_ap(scores, targets) -> np.ndarray:
    """AP per column; NaN for classes without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if targets[:, c].any():
            out[c] = average_precision(scores[:, c], targets[:, c])
    return out


def map_classification(scores, labels) -> float:
    """Mean AP over classes with at least one positive.

    ``labels`` is either a multi-hot ``[N, K]`` array or integer class ids ``[N]``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _nonempty(labels)
    if labels.ndim == 1:
        onehot = np.zeros(scores.shape, dtype=bool)
        onehot[np.arange(len(labels)), labels.astype(np.int64)] = True
        labels = onehot
    ap = per_class_ap(scores, labels)
    return float(np.nanmean(ap))


def _check_box(b) -> None:
    x1, y1, x2, y2 = b
    if not (x1 < x2 and y1 < y2) or not np.isfinite([x1, y1, x2, y2]).all():
        raise DataError(f"malformed box {tuple(float(v) for v in b)}; need x1 < x2 and y1 < y2")


def iou(box_a, box_b) -> float:
    _check_box(box_a)
    _check_box(box_b)
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class Detection:
    image: int
    box: tuple
    label: int
    score: float


@dataclass
class GroundTruth:
    image: int
    box: tuple
    label: int


def map_detection(preds: Sequence[Detection], gts: Sequence[GroundTruth], thr: float = 0.5,
                  return_per_class: bool = False):
    """mAP at an IoU threshold with greedy score-ordered matching.

    Per class, detections are visited by decreasing score (ties by list
    position) and matched to the unmatched ground truth of the same image
    with the highest IoU, if that IoU reaches ``thr``. Classes without ground
    truth are left out of the mean.
    """
    for d in preds:
        _check_box(d.box)
    for g in gts:
        _check_box(g.box)
    classes = sorted({g.label for g in gts})
    aps = {}
    for c in classes:
        cls_gt = [g for g in gts if g.label == c]
        by_image: dict[int, list[int]] = {}
        for k, g in enumerate(cls_gt):
            by_image.setdefault(g.image, []).append(k)
        matched = np.zeros(len(cls_gt), dtype=bool)
        dets = [d for d in preds if d.label == c]
        order = np.argsort(-np.asarray([d.score for d in dets], dtype=np.float64), kind="stable")
        hits = np.zeros(len(dets))
        for rank, k in enumerate(order):
            d = dets[k]
            best, best_iou = -1, -1.0
            for gk in by_image.get(d.image, []):
                if matched[gk]:
                    continue
                ov = iou(d.box, cls_gt[gk].box)
                if ov >= thr and ov > best_iou:
                    best, best_iou = gk, ov
            if best >= 0:
                matched[best] = True
                hits[rank] = 1
        aps[c] = _ap_from_hits(hits, len(cls_gt))
    value = float(np.mean(list(aps.values()))) if aps else float("nan")
    return (value, aps) if return_per_class else value


@dataclass
class TaskMetrics:
    mAP: float
    acc: float
    b_acc: float
    recall: float
    per_class_ap: list = field(default_factory=list)


@dataclass
class MetricsReport:
    tasks: dict[str, TaskMetrics]
    detection: dict[str, float]
    params: dict[str, float] = field(default_factory=dict)
    n_clips: int = 0

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and np.isnan(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean({"tasks": {k: asdict(v) for k, v in self.tasks.items()}, "detection": self.detection,
                      "params": self.params, "n_clips": self.n_clips})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Plain-text table: one row per task, metric columns."""
        head = f"{'Task':<12}{'mAP':>8}{'Acc':>8}{'B-Acc':>8}{'Recall':>8}{'mAP@0.5IoU':>12}"
        lines = [head, "-" * len(head)]
        for name, m in self.tasks.items():
            det = self.detection.get(name)
            det_s = f"{det:>12.4f}" if det is not None and not np.isnan(det) else f"{'-':>12}"
            lines.append(f"{name:<12}{m.mAP:>8.4f}{m.acc:>8.4f}{m.b_acc:>8.4f}{m.recall:>8.4f}{det_s}")
        if self.params:
            p = self.params
            lines.append(f"params: total {int(p['total'])}, tunable {int(p['tunable'])} ({100 * p['fraction']:.1f}%)")
        return "\n".join(lines)
