"""Rendering of evaluation reports: delimited output plus matplotlib figures
written to files next to it."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402
from .metrics import DEFAULT_TIOU_THRESHOLDS, precision_recall  # noqa: E402


def format_ap_table(table, thresholds=DEFAULT_TIOU_THRESHOLDS) -> str:
    """Compact per-class AP table for stdout; NaN renders as n/a."""

    def fmt(v):
        return "   n/a" if np.isnan(v) else f"{100 * v:6.2f}"

    lines = ["class     " + "".join(f"  @{t:<4}" for t in thresholds) + "    Avg."]
    for cls in CLASS_NAMES:
        row = table[cls]
        lines.append(
            f"{cls:<10}" + "".join(fmt(row[t]) for t in thresholds) + "  " + fmt(row["avg"])
        )
    lines.append(f"mean Avg. {fmt(table['mean_avg'])}")
    return "\n".join(lines)


def write_ap_csv(table, path, thresholds=DEFAULT_TIOU_THRESHOLDS) -> None:
    """Rows (class, tiou, ap) plus per-class and overall means."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "tiou", "ap"])
        for cls in CLASS_NAMES:
            for t in thresholds:
                writer.writerow([cls, t, f"{table[cls][t]:.6f}"])
            writer.writerow([cls, "avg", f"{table[cls]['avg']:.6f}"])
        writer.writerow(["all", "mean_avg", f"{table['mean_avg']:.6f}"])


def render_ap_figure(table, path, thresholds=DEFAULT_TIOU_THRESHOLDS) -> None:
    """Grouped bars of AP per class over the tIoU thresholds."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(thresholds))
    width = 0.8 / len(CLASS_NAMES)
    for k, cls in enumerate(CLASS_NAMES):
        vals = [table[cls][t] for t in thresholds]
        ax.bar(x + k * width, vals, width, label=f"{cls} (avg {table[cls]['avg']:.2f})")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([str(t) for t in thresholds])
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_pr_figure(proposals, ground_truth, path, threshold=0.5) -> None:
    """Per-class precision-recall curves at one tIoU threshold."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for cls in CLASS_NAMES:
        pr = precision_recall(proposals, ground_truth, cls, threshold)
        if pr is None or pr[0].size == 0:
            continue
        recall, precision = pr
        ax.step(np.concatenate([[0.0], recall]),
                np.concatenate([[1.0], precision]), where="post", label=cls)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"PR at tIoU {threshold}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_loss_curve(metrics_csv, path) -> None:
    """Loss components over training steps, from the trainer's metrics log."""
    steps, total, cls_pos, cls_neg, reg = [], [], [], [], []
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            total.append(float(row["total_loss"]))
            cls_pos.append(float(row["cls_pos"]))
            cls_neg.append(float(row["cls_neg"]))
            reg.append(float(row["reg"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, total, label="total", lw=1.5)
    ax.plot(steps, cls_pos, label="cls (pos)", lw=0.8)
    ax.plot(steps, cls_neg, label="cls (neg)", lw=0.8)
    ax.plot(steps, reg, label="reg", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
