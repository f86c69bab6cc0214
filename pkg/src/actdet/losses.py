"""Focal classification loss, interval DIoU regression loss, and the
combined training objective.

The total objective averages, over positive moments, the IoU-weighted focal
term plus the DIoU regression term, and over negative moments the plain
focal term. The IoU weight of each positive is the tIoU between its decoded
prediction and its ground-truth segment, treated as a constant (no gradient
flows through it).
"""

from __future__ import annotations

import numpy as np

from .assign import MomentTargets
from .network import HeadOutputs, sigmoid

PROB_EPS = 1e-7


def focal_loss(p, y, gamma: float = 2.0):
    """Elementwise focal loss on probabilities p with binary targets y."""
    p = np.clip(np.asarray(p, dtype=float), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=float)
    return -(
        y * (1.0 - p) ** gamma * np.log(p)
        + (1.0 - y) * p**gamma * np.log(1.0 - p)
    )


def focal_loss_from_logits(z, y, gamma: float = 2.0):
    """(loss, dloss/dz) elementwise, consistent with the clamped forward."""
    p_raw = sigmoid(np.asarray(z, dtype=float))
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=float)
    loss = focal_loss(p, y, gamma)
    dl_dp = y * (gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p) + (
        1.0 - y
    ) * (-gamma * p ** (gamma - 1.0) * np.log(1.0 - p) + p**gamma / (1.0 - p))
    inside = (p_raw > PROB_EPS) & (p_raw < 1.0 - PROB_EPS)
    dp_dz = np.where(inside, p_raw * (1.0 - p_raw), 0.0)
    return loss, dl_dp * dp_dz


def interval_iou(a1, a2, b1, b2):
    """1D IoU of intervals [a1, a2] and [b1, b2] (vectorized)."""
    inter = np.clip(np.minimum(a2, b2) - np.maximum(a1, b1), 0.0, None)
    union = (a2 - a1) + (b2 - b1) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)


def diou_loss(a, b) -> float:
    """DIoU loss between prediction a=(a1,a2) and target b=(b1,b2).

    1 - IoU + (center distance)^2 / (enclosing length)^2, in [0, 2).
    A degenerate prediction (a1 >= a2) is treated as the point (a1+a2)/2.
    """
    a1, a2 = float(a[0]), float(a[1])
    b1, b2 = float(b[0]), float(b[1])
    if a1 >= a2:
        m = 0.5 * (a1 + a2)
        a1 = a2 = m
    iou = float(interval_iou(a1, a2, b1, b2)) if a2 > a1 else 0.0
    c = max(a2, b2) - min(a1, b1)
    dc = 0.5 * ((a1 + a2) - (b1 + b2))
    return 1.0 - iou + (dc * dc) / (c * c)


def _diou_with_grad(a1, a2, b1, b2):
    """Vectorized (loss, dL/da1, dL/da2) for nondegenerate predictions."""
    inter_raw = np.minimum(a2, b2) - np.maximum(a1, b1)
    overlap = inter_raw > 0
    inter = np.clip(inter_raw, 0.0, None)
    union = (a2 - a1) + (b2 - b1) - inter
    iou = inter / union
    di_da1 = np.where(overlap & (a1 > b1), -1.0, 0.0)
    di_da2 = np.where(overlap & (a2 < b2), 1.0, 0.0)
    du_da1 = -1.0 - di_da1
    du_da2 = 1.0 - di_da2
    diou_da1 = (di_da1 * union - inter * du_da1) / union**2
    diou_da2 = (di_da2 * union - inter * du_da2) / union**2

    c = np.maximum(a2, b2) - np.minimum(a1, b1)
    dc = 0.5 * ((a1 + a2) - (b1 + b2))
    dcenc_da1 = np.where(a1 < b1, -1.0, 0.0)
    dcenc_da2 = np.where(a2 > b2, 1.0, 0.0)
    pen = dc * dc / (c * c)
    dpen_da1 = dc / (c * c) - 2.0 * pen / c * dcenc_da1
    dpen_da2 = dc / (c * c) - 2.0 * pen / c * dcenc_da2

    loss = 1.0 - iou + pen
    return loss, -diou_da1 + dpen_da1, -diou_da2 + dpen_da2


def total_loss(outputs: HeadOutputs, targets: MomentTargets, gamma: float = 2.0,
               sigma_iou=None):
    """Combined objective and its gradients at the head outputs.

    Returns (loss, components, d_logits, d_offsets). `sigma_iou` may supply
    frozen per-level IoU weights (as produced in components["sigma_iou"]);
    when omitted they are recomputed from the current predictions. Either
    way no gradient flows through them.
    """
    n_levels = len(outputs.logits)
    n_pos = targets.n_pos
    n_neg = targets.n_neg
    cls_pos = cls_neg = reg = 0.0
    d_logits = [np.zeros_like(z) for z in outputs.logits]
    d_offsets = [np.zeros_like(o) for o in outputs.offsets]
    sigma_used = []

    for l in range(n_levels):
        z = outputs.logits[l]
        off = outputs.offsets[l]
        stride = outputs.strides[l]
        pos = targets.positive[l]
        cls = targets.class_index[l]
        tgt = targets.offsets[l]
        n = z.shape[1]
        n_classes = z.shape[0]

        y = np.zeros((n_classes, n))
        if pos.any():
            y[cls[pos], np.nonzero(pos)[0]] = 1.0

        t_grid = np.arange(n) * stride
        a1 = t_grid - off[0] * stride
        a2 = t_grid + off[1] * stride
        b1 = t_grid - tgt[0] * stride
        b2 = t_grid + tgt[1] * stride

        if sigma_iou is not None:
            sigma = np.asarray(sigma_iou[l], dtype=float)
        else:
            sigma = np.where(pos, interval_iou(a1, a2, b1, b2), 0.0)
        sigma_used.append(sigma)

        weight = np.where(pos, sigma / max(n_pos, 1), 1.0 / max(n_neg, 1))
        loss_el, dz_el = focal_loss_from_logits(z, y, gamma)
        cls_pos += float((loss_el[:, pos] * weight[pos][None, :]).sum())
        cls_neg += float((loss_el[:, ~pos] * weight[~pos][None, :]).sum())
        d_logits[l] += dz_el * weight[None, :]

        if pos.any() and n_pos > 0:
            idx = np.nonzero(pos)[0]
            dloss, da1, da2 = _diou_with_grad(a1[idx], a2[idx], b1[idx], b2[idx])
            reg += float(dloss.sum()) / n_pos
            d_offsets[l][0, idx] = da1 * (-stride) / n_pos
            d_offsets[l][1, idx] = da2 * stride / n_pos

    total = cls_pos + cls_neg + reg
    components = {
        "total": total,
        "cls_pos": cls_pos,
        "cls_neg": cls_neg,
        "reg": reg,
        "n_pos": n_pos,
        "n_neg": n_neg,
        "sigma_iou": sigma_used,
    }
    return total, components, d_logits, d_offsets
