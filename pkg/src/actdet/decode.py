"""Turning head outputs into scored proposals, plus Gaussian Soft-NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES, Proposal
from .errors import ConfigError
from .losses import interval_iou
from .network import HeadOutputs, sigmoid


@dataclass(frozen=True)
class DecodeConfig:
    pre_nms_topk: int = 2000
    score_floor: float = 0.001
    softnms_sigma: float = 0.5
    softnms_prune: float = 0.001
    max_detections_per_video: int = 200

    def __post_init__(self):
        if min(self.pre_nms_topk, self.max_detections_per_video) < 1:
            raise ConfigError("topk/max_detections must be positive")
        if min(self.score_floor, self.softnms_sigma, self.softnms_prune) <= 0:
            raise ConfigError("score_floor/sigma/prune must be positive")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad decode config: {exc}") from exc


def _sort_key(p: Proposal):
    return (-p.score, p.start_s, p.end_s, p.label)


def decode_proposals(outputs: HeadOutputs, video_id: str, feature_fps: float,
                     duration_s: float, cfg: DecodeConfig) -> list:
    """Raw proposals from every level/moment/class above the score floor,
    truncated to the top pre_nms_topk by score."""
    raw = []
    for l, (logits, off) in enumerate(zip(outputs.logits, outputs.offsets)):
        stride = outputs.strides[l]
        n = logits.shape[1]
        t_grid = np.arange(n) * stride
        start = np.clip((t_grid - off[0] * stride) / feature_fps, 0.0, duration_s)
        end = np.clip((t_grid + off[1] * stride) / feature_fps, 0.0, duration_s)
        probs = sigmoid(logits)
        for c, cls in enumerate(CLASS_NAMES[:logits.shape[0]]):
            keep = (probs[c] >= cfg.score_floor) & (start < end)
            for i in np.nonzero(keep)[0]:
                raw.append(
                    Proposal(video_id, cls, float(start[i]), float(end[i]),
                             float(probs[c, i]))
                )
    raw.sort(key=_sort_key)
    return raw[:cfg.pre_nms_topk]


def soft_nms(proposals, cfg: DecodeConfig) -> list:
    """Per-class Gaussian score decay; proposals must be from one video.

    Repeatedly keep the highest-scoring remaining proposal m and rescale
    every other remaining score of the same class by exp(-tIoU(m, p)^2 / sigma);
    scores below softnms_prune are dropped. Deterministic under input order.
    """
    out = []
    for cls in sorted({p.label for p in proposals}):
        group = sorted((p for p in proposals if p.label == cls), key=_sort_key)
        starts = np.array([p.start_s for p in group])
        ends = np.array([p.end_s for p in group])
        scores = np.array([p.score for p in group])
        alive = np.ones(len(group), dtype=bool)
        while alive.any():
            order = np.lexsort((ends, starts, -scores))
            m = next(i for i in order if alive[i])
            alive[m] = False
            out.append(Proposal(group[m].video_id, cls, float(starts[m]),
                                float(ends[m]), float(scores[m])))
            if not alive.any():
                break
            iou = interval_iou(starts[m], ends[m], starts[alive], ends[alive])
            scores[alive] *= np.exp(-(iou**2) / cfg.softnms_sigma)
            alive &= scores >= cfg.softnms_prune
    out.sort(key=_sort_key)
    return out[:cfg.max_detections_per_video]
