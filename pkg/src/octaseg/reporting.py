"""Figure rendering for run reports: overlays, loss curves, fold metrics.

All functions write image files next to the delimited outputs; nothing here
opens a display (Agg backend only).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport
from .promptgen import PromptPointSet

POSITIVE_COLOR = "#19c219"  # green prompt points
NEGATIVE_COLOR = "#e03030"  # red prompt points
MASK_COLOR = (0.1, 0.55, 0.95)


def save_overlay(
    image: np.ndarray,
    path: str | Path,
    mask: np.ndarray | None = None,
    points: PromptPointSet | None = None,
    alpha: float = 0.45,
    title: str = "",
) -> Path:
    """Render the image with an optional mask overlay and prompt points."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 6))
    base = image if image.ndim == 3 else np.stack([image] * 3, axis=-1)
    ax.imshow(np.clip(base, 0, 1))
    if mask is not None:
        overlay = np.zeros((*mask.shape, 4), dtype=np.float32)
        overlay[mask > 0] = (*MASK_COLOR, alpha)
        ax.imshow(overlay)
    if points is not None and points.points:
        pos = [(p.x, p.y) for p in points.points if p.polarity == 1]
        neg = [(p.x, p.y) for p in points.points if p.polarity == 0]
        if pos:
            xs, ys = zip(*pos)
            ax.scatter(xs, ys, c=POSITIVE_COLOR, marker="o", s=40, edgecolors="white", linewidths=0.8)
        if neg:
            xs, ys = zip(*neg)
            ax.scatter(xs, ys, c=NEGATIVE_COLOR, marker="x", s=40, linewidths=1.5)
    if title:
        ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_curve(records: list[dict], path: str | Path) -> Path:
    """Epoch-vs-loss curve with the learning rate on a twin axis."""
    path = Path(path)
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r["loss"] for r in records], color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in records], color="tab:orange", alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_fold_metrics(report: MetricReport, path: str | Path) -> Path:
    """Per-fold bar chart of the aggregate metrics."""
    path = Path(path)
    folds = sorted(report.fold_means)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key in zip(axes, ("dice", "jaccard", "hd_px")):
        vals = [report.fold_means[f].get(key) for f in folds]
        pairs = [(f, v) for f, v in zip(folds, vals) if v is not None]
        if pairs:
            xs, ys = zip(*pairs)
            ax.bar([str(x) for x in xs], ys, color="tab:blue")
            if key in report.overall:
                ax.axhline(report.overall[key], color="tab:orange", linestyle="--", linewidth=1)
        ax.set_title(key)
        ax.set_xlabel("fold")
    fig.suptitle(f"{report.task} {report.dataset}".strip())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
