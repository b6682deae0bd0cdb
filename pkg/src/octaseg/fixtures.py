"""Synthetic OCTA-like fixtures: vessel trees, FAZ blobs, and dataset trees.

Purely procedural stand-ins for licensed datasets; every generator is
deterministic under the supplied seed.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import yaml

from .dataio import Mask, OctaSample


def vessel_tree(
    side: int,
    rng: np.random.Generator,
    n_branches: int = 5,
    thickness: int = 3,
    forbidden: np.ndarray | None = None,
) -> np.ndarray:
    """Draw a random vascular tree as a binary uint8 mask.

    Branches random-walk inward from the border with momentum; ``forbidden``
    pixels (e.g. a FAZ region) are kept vessel-free.
    """
    mask = np.zeros((side, side), dtype=np.uint8)
    for _ in range(n_branches):
        edge = rng.integers(0, 4)
        if edge == 0:
            x, y = rng.uniform(0, side), 0.0
        elif edge == 1:
            x, y = rng.uniform(0, side), float(side - 1)
        elif edge == 2:
            x, y = 0.0, rng.uniform(0, side)
        else:
            x, y = float(side - 1), rng.uniform(0, side)
        angle = np.arctan2(side / 2 - y, side / 2 - x) + rng.uniform(-0.5, 0.5)
        steps = rng.integers(side // 2, int(side * 1.2))
        prev = (int(round(x)), int(round(y)))
        for _ in range(steps):
            angle += rng.uniform(-0.35, 0.35)
            x += np.cos(angle) * 2.0
            y += np.sin(angle) * 2.0
            if not (0 <= x < side and 0 <= y < side):
                break
            cur = (int(round(x)), int(round(y)))
            cv2.line(mask, prev, cur, color=1, thickness=thickness)
            prev = cur
    if forbidden is not None:
        mask[forbidden > 0] = 0
    return mask


def faz_region(side: int, rng: np.random.Generator) -> np.ndarray:
    """An irregular avascular blob near the image center."""
    mask = np.zeros((side, side), dtype=np.uint8)
    cx = side / 2 + rng.uniform(-side * 0.05, side * 0.05)
    cy = side / 2 + rng.uniform(-side * 0.05, side * 0.05)
    ax = rng.uniform(side * 0.08, side * 0.14)
    ay = rng.uniform(side * 0.08, side * 0.14)
    ang = rng.uniform(0, 180)
    cv2.ellipse(mask, (int(cx), int(cy)), (int(ax), int(ay)), ang, 0, 360, color=1, thickness=-1)
    return mask


def make_sample(
    sample_id: str,
    side: int,
    rng: np.random.Generator,
    tasks: tuple[str, ...] = ("RV", "FAZ"),
    fov: str = "other",
    source: str = "synthetic",
) -> OctaSample:
    """Build one synthetic subject with the requested label tasks."""
    faz = faz_region(side, rng)
    rv = vessel_tree(side, rng, n_branches=5, thickness=max(3, side // 18), forbidden=faz)

    labels: dict[str, Mask] = {}
    if "RV" in tasks:
        labels["RV"] = Mask(rv)
    if "FAZ" in tasks:
        labels["FAZ"] = Mask(faz)
    if "capillary" in tasks:
        cap = vessel_tree(side, rng, n_branches=9, thickness=max(1, side // 48), forbidden=faz)
        labels["capillary"] = Mask(np.maximum(cap, rv))
    if "artery" in tasks or "vein" in tasks:
        artery = vessel_tree(side, rng, n_branches=3, thickness=max(3, side // 18), forbidden=faz)
        vein = vessel_tree(side, rng, n_branches=3, thickness=max(3, side // 18), forbidden=faz)
        vein[artery > 0] = 0  # overlaps resolved artery-first
        if "artery" in tasks:
            labels["artery"] = Mask(artery)
        if "vein" in tasks:
            labels["vein"] = Mask(vein)
        rv = np.maximum(rv, np.maximum(artery, vein))
        if "RV" in tasks:
            labels["RV"] = Mask(rv)

    vessel = rv.astype(np.float32)
    noise = rng.uniform(0.0, 0.12, size=(side, side)).astype(np.float32)
    base = np.clip(vessel * 0.75 + noise, 0, 1)
    shallow = cv2.GaussianBlur(base, (3, 3), 0)
    deep = cv2.GaussianBlur(base, (5, 5), 0) * 0.8
    full = np.clip(0.5 * shallow + 0.5 * deep + noise * 0.3, 0, 1)
    image = np.clip(np.stack([shallow, deep, full], axis=-1), 0, 1)
    return OctaSample(id=sample_id, image=image, labels=labels, fov_mm=fov, source=source)


def write_dataset(
    root: str | Path,
    n_samples: int,
    side: int,
    seed: int,
    tasks: tuple[str, ...] = ("RV", "FAZ"),
    drop_labels: dict[str, tuple[str, ...]] | None = None,
) -> Path:
    """Write a loadable dataset tree plus layout.yaml; returns the layout path.

    ``drop_labels`` maps sample id -> tasks to omit, for exercising the
    missing-label reporting path.
    """
    root = Path(root)
    layers = ("layer_shallow", "layer_deep", "layer_full")
    label_dirs = {t: f"label_{t}" for t in tasks}
    for d in layers:
        (root / d).mkdir(parents=True, exist_ok=True)
    for d in label_dirs.values():
        (root / d).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    drop_labels = drop_labels or {}
    for i in range(n_samples):
        sid = f"{i:04d}"
        sample = make_sample(sid, side, rng, tasks=tasks)
        for c, d in enumerate(layers):
            _write_gray(root / d / f"{sid}.png", sample.image[..., c])
        for task, d in label_dirs.items():
            if task in drop_labels.get(sid, ()):
                continue
            _write_gray(root / d / f"{sid}.png", sample.labels[task].data.astype(np.float32))

    layout_path = root / "layout.yaml"
    with open(layout_path, "w") as fh:
        yaml.safe_dump(
            {
                "layers": list(layers),
                "labels": label_dirs,
                "fov": "other",
                "source": "synthetic",
            },
            fh,
        )
    return layout_path


def _write_gray(path: Path, values01: np.ndarray) -> None:
    cv2.imwrite(str(path), (np.clip(values01, 0, 1) * 255).astype(np.uint8))
