"""Evaluation: temporal IoU, average precision at tIoU thresholds, mean AP,
FPR at a recall target, and the fixed-length clip splitting used by the
clip-analysis mode."""

from __future__ import annotations

import numpy as np

from .data import CLASS_NAMES, FeatureSequence
from .errors import MetricError

DEFAULT_TIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def tiou(a, b) -> float:
    """IoU of time intervals a=(start, end), b=(start, end)."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def precision_recall(proposals, ground_truth, label: str, threshold: float):
    """PR points for one class at one tIoU threshold over a whole test set.

    Proposals are matched greedily in descending score order against
    unmatched same-video ground-truth segments (best tIoU wins, matched at
    most once, tIoU must reach the threshold). Returns (recall, precision)
    arrays with one point per ranked proposal, or None when the class has
    no ground-truth segments.
    """
    gt = [
        (vid, seg)
        for vid, segs in ground_truth.items()
        for seg in segs
        if seg.label == label
    ]
    if not gt:
        return None
    preds = sorted(
        (p for p in proposals if p.label == label),
        key=lambda p: (-p.score, p.start_s, p.end_s, p.video_id),
    )
    matched = [False] * len(gt)
    tp = np.zeros(len(preds))
    for i, p in enumerate(preds):
        best_iou, best_j = 0.0, -1
        for j, (vid, seg) in enumerate(gt):
            if matched[j] or vid != p.video_id:
                continue
            ov = tiou((p.start_s, p.end_s), (seg.start_s, seg.end_s))
            if ov > best_iou:
                best_iou, best_j = ov, j
        if best_j >= 0 and best_iou >= threshold:
            matched[best_j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gt)
    precision = cum_tp / np.arange(1, len(preds) + 1) if preds else np.zeros(0)
    return recall, precision


def average_precision(proposals, ground_truth, label: str, threshold: float) -> float:
    """AP for one class at one tIoU threshold: area under the all-point
    interpolated PR curve (precision envelope). NaN without ground truth."""
    pr = precision_recall(proposals, ground_truth, label, threshold)
    if pr is None:
        return float("nan")
    recall, precision = pr
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[step] - mrec[step - 1]) * mpre[step]))


def ap_table(proposals, ground_truth, thresholds=DEFAULT_TIOU_THRESHOLDS) -> dict:
    """{class: {threshold: AP, "avg": mean over thresholds}} plus "mean_avg"."""
    table = {}
    avgs = []
    for cls in CLASS_NAMES:
        row = {t: average_precision(proposals, ground_truth, cls, t) for t in thresholds}
        vals = [v for v in row.values() if not np.isnan(v)]
        row["avg"] = float(np.mean(vals)) if vals else float("nan")
        if not np.isnan(row["avg"]):
            avgs.append(row["avg"])
        table[cls] = row
    table["mean_avg"] = float(np.mean(avgs)) if avgs else float("nan")
    return table


def fpr_at_recall(scores, labels, recall_target: float = 0.95) -> float:
    """False-positive rate at the loosest threshold reaching the recall target."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0:
        raise MetricError("fpr_at_recall needs at least one positive label")
    # largest threshold whose recall meets the target
    candidates = np.unique(scores)[::-1]
    for thr in candidates:
        sel = scores >= thr
        recall = labels[sel].sum() / n_pos
        if recall >= recall_target:
            if n_neg == 0:
                return 0.0
            return float((sel & (labels == 0)).sum() / n_neg)
    return 1.0


def clip_split(video: FeatureSequence, segments, clip_len_s: float = 30.0):
    """Non-overlapping consecutive clips with per-class binary labels.

    A clip is positive for a class when at least half of it lies inside a
    segment of that class. The trailing partial clip is dropped. Returns a
    list of (clip_features, labels) with labels keyed by class name.
    """
    if clip_len_s <= 0:
        raise MetricError("clip_len_s must be positive")
    n_clips = int(video.duration_s // clip_len_s)
    out = []
    for k in range(n_clips):
        t0, t1 = k * clip_len_s, (k + 1) * clip_len_s
        i0 = int(np.floor(t0 * video.feature_fps))
        i1 = max(i0 + 1, int(np.floor(t1 * video.feature_fps)))
        i1 = min(i1, video.num_steps)
        labels = {}
        for cls in CLASS_NAMES:
            overlap = sum(
                max(0.0, min(t1, s.end_s) - max(t0, s.start_s))
                for s in segments
                if s.label == cls
            )
            labels[cls] = int(overlap >= 0.5 * clip_len_s)
        out.append((video.features[i0:i1], labels))
    return out
