"""Evaluation metrics on binarized masks: Dice, Jaccard, Hausdorff distance.

Hausdorff is the exact symmetric max-min Euclidean distance between the two
foreground pixel sets (no boundary extraction, no percentile variant),
reported in pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import Mask


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined when either mask is empty."""


def _binary(mask: Mask | np.ndarray) -> np.ndarray:
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    return data.astype(bool)


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def binarize(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(soft) > threshold).astype(np.uint8)


def dice_score(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1 by convention."""
    p, g = _binary(pred), _binary(gt)
    _check_shapes(p, g)
    inter = int(np.count_nonzero(p & g))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def jaccard_score(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    """|A n B| / |A u B|; equals dice / (2 - dice) on the same counts."""
    p, g = _binary(pred), _binary(gt)
    _check_shapes(p, g)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return inter / union


def hausdorff(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels.

    Computed from exact Euclidean distance transforms, so each directed
    distance is max over one set of the distance to the nearest pixel of
    the other.
    """
    p, g = _binary(pred), _binary(gt)
    _check_shapes(p, g)
    if not p.any() or not g.any():
        raise EmptyMaskError("HD undefined: empty mask")
    if np.array_equal(p, g):
        return 0.0
    d_to_g = ndimage.distance_transform_edt(~g)
    d_to_p = ndimage.distance_transform_edt(~p)
    return float(max(d_to_g[p].max(), d_to_p[g].max()))


@dataclass
class SampleMetrics:
    sample_id: str
    fold: int
    dice: float
    jaccard: float
    hd_px: float | None  # None when HD was undefined


@dataclass
class MetricReport:
    """Per-sample metrics plus fold-level and overall aggregates."""

    task: str = ""
    dataset: str = ""
    samples: list[SampleMetrics] = field(default_factory=list)
    fold_means: dict[int, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)
    missing_hd: int = 0
    notes: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "fold", "dice", "jaccard", "hd_px"])
            for s in self.samples:
                writer.writerow([s.sample_id, s.fold, f"{s.dice:.6f}", f"{s.jaccard:.6f}",
                                 "" if s.hd_px is None else f"{s.hd_px:.6f}"])

    def table(self) -> str:
        lines = [f"task={self.task} dataset={self.dataset} samples={len(self.samples)}"]
        lines.append(f"{'fold':>6} {'dice':>8} {'jaccard':>8} {'hd_px':>8}")
        for fold in sorted(self.fold_means):
            m = self.fold_means[fold]
            hd = f"{m['hd_px']:8.4f}" if "hd_px" in m else f"{'n/a':>8}"
            lines.append(f"{fold:>6} {m['dice']:8.4f} {m['jaccard']:8.4f} {hd}")
        o = self.overall
        hd = f"{o['hd_px']:8.4f}" if "hd_px" in o else f"{'n/a':>8}"
        lines.append(f"{'mean':>6} {o.get('dice', float('nan')):8.4f} "
                     f"{o.get('jaccard', float('nan')):8.4f} {hd}")
        if self.missing_hd:
            lines.append(f"HD undefined for {self.missing_hd} sample(s), excluded from the mean")
        lines.extend(self.notes)
        return "\n".join(lines)


def aggregate(samples: list[SampleMetrics], task: str = "", dataset: str = "") -> MetricReport:
    """Mean per fold, then mean of fold means; HD-less samples are excluded
    from the HD aggregate with a recorded count."""
    report = MetricReport(task=task, dataset=dataset, samples=list(samples))
    by_fold: dict[int, list[SampleMetrics]] = {}
    for s in samples:
        by_fold.setdefault(s.fold, []).append(s)
    for fold, items in sorted(by_fold.items()):
        means = {
            "dice": float(np.mean([s.dice for s in items])),
            "jaccard": float(np.mean([s.jaccard for s in items])),
        }
        hds = [s.hd_px for s in items if s.hd_px is not None]
        if hds:
            means["hd_px"] = float(np.mean(hds))
        report.fold_means[fold] = means
    report.missing_hd = sum(1 for s in samples if s.hd_px is None)
    if report.fold_means:
        for key in ("dice", "jaccard", "hd_px"):
            vals = [m[key] for m in report.fold_means.values() if key in m]
            if vals:
                report.overall[key] = float(np.mean(vals))
                report.overall[f"{key}_std"] = float(np.std(vals))
    return report
