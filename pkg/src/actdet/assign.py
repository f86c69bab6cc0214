"""Ground-truth assignment of segments to pyramid moments.

A moment at level l (stride 2^(l-1) on the feature grid) is positive for a
segment when it lies inside the segment, sits within a center-radius window,
and the larger of its two boundary offsets falls in the level's regression
range. Overlaps go to the shortest segment. Offset targets are expressed in
units of the level's stride.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, Segment
from .errors import ConfigError


def default_regression_ranges(n_levels: int) -> tuple:
    """Half-open ranges (lo, hi] of max-offset magnitude, level-1 grid units."""
    ranges = []
    hi = 4.0
    for l in range(n_levels):
        lo = 0.0 if l == 0 else hi / 2
        top = np.inf if l == n_levels - 1 else hi
        ranges.append((lo, top))
        hi *= 2
    return tuple(ranges)


@dataclass(frozen=True)
class AssignmentConfig:
    n_levels: int = 7
    center_radius: float = 1.5
    regression_ranges: tuple = None  # filled from n_levels when omitted

    def __post_init__(self):
        if self.center_radius <= 0:
            raise ConfigError("center_radius must be positive")
        if self.regression_ranges is None:
            object.__setattr__(
                self, "regression_ranges", default_regression_ranges(self.n_levels)
            )
        if len(self.regression_ranges) != self.n_levels:
            raise ConfigError("need one regression range per level")


@dataclass
class MomentTargets:
    """Per-level assignment results over valid moments.

    positive: bool (n,): class_index: int (n,), -1 for negatives;
    offsets: (2, n) stride-unit distances to segment start/end;
    segment_index: int (n,), -1 for negatives. sigma_iou is filled by the
    loss with the tIoU of the currently decoded prediction per positive.
    """

    positive: list
    class_index: list
    offsets: list
    segment_index: list
    strides: list
    feature_fps: float
    sigma_iou: list = field(default_factory=list)

    @property
    def n_pos(self) -> int:
        return int(sum(p.sum() for p in self.positive))

    @property
    def n_neg(self) -> int:
        return int(sum((~p).sum() for p in self.positive))


def assign_targets(segments, valid_lengths, strides, feature_fps: float,
                   cfg: AssignmentConfig) -> MomentTargets:
    if len(valid_lengths) != cfg.n_levels:
        raise ConfigError("pyramid depth disagrees with assignment config")
    # shortest segment wins ties; scan in ascending duration and keep first hit
    order = sorted(range(len(segments)), key=lambda i: segments[i].duration_s)
    positive, class_index, offsets, seg_index = [], [], [], []
    for l in range(cfg.n_levels):
        n = valid_lengths[l]
        stride = strides[l]
        t_grid = np.arange(n) * stride  # level-1 grid coordinates
        t_s = t_grid / feature_fps
        pos = np.zeros(n, dtype=bool)
        cls = np.full(n, -1, dtype=int)
        off = np.zeros((2, n))
        sidx = np.full(n, -1, dtype=int)
        lo, hi = cfg.regression_ranges[l]
        radius_s = cfg.center_radius * stride / feature_fps
        for i in order:
            seg = segments[i]
            d_start = (t_s - seg.start_s) * feature_fps  # level-1 grid units
            d_end = (seg.end_s - t_s) * feature_fps
            max_off = np.maximum(d_start, d_end)
            center = 0.5 * (seg.start_s + seg.end_s)
            hit = (
                (t_s >= seg.start_s)
                & (t_s <= seg.end_s)
                & (np.abs(t_s - center) <= radius_s)
                & (max_off > lo)
                & (max_off <= hi)
                & ~pos
            )
            if not hit.any():
                continue
            pos |= hit
            cls[hit] = CLASS_NAMES.index(seg.label)
            off[0, hit] = d_start[hit] / stride
            off[1, hit] = d_end[hit] / stride
            sidx[hit] = i
        positive.append(pos)
        class_index.append(cls)
        offsets.append(off)
        seg_index.append(sidx)
    return MomentTargets(positive, class_index, offsets, seg_index,
                         list(strides), feature_fps)
