"""Dataset ingestion and geometry for OCTA en-face imagery.

Images are float arrays in [0, 1] with shape (H, W, 3); label masks are
uint8 arrays of the same H x W. Every geometric operation returns a
``GeometricTransform`` so prompt coordinates, masks, and images stay
aligned through scaling, padding, augmentation, and local cropping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from . import TASKS

log = logging.getLogger(__name__)

BINARY_VALUES = frozenset({0, 1})
AV_CLASS_VALUES = frozenset({0, 1, 2})

FOV_TAGS = ("3M", "6M", "other")


class LayoutError(Exception):
    """The dataset layout descriptor is unusable (missing dirs, bad task names)."""


@dataclass
class Mask:
    """A label raster: binary {0,1} or artery-vein class mask {0,1,2}."""

    data: np.ndarray
    kind: str = "binary"  # "binary" or "av"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        allowed = BINARY_VALUES if self.kind == "binary" else AV_CLASS_VALUES
        values = set(np.unique(self.data).tolist())
        if not values <= allowed:
            raise ValueError(f"mask values {sorted(values)} outside {sorted(allowed)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass
class OctaSample:
    """One subject: stacked 3-channel en-face image plus per-task labels."""

    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    labels: dict[str, Mask] = field(default_factory=dict)
    fov_mm: str = "other"
    source: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image intensities must lie in [0, 1]")
        if self.fov_mm not in FOV_TAGS:
            raise ValueError(f"fov_mm must be one of {FOV_TAGS}")
        h, w = self.image.shape[:2]
        for task, mask in self.labels.items():
            if task not in TASKS:
                raise ValueError(f"unknown task {task!r}")
            if mask.shape != (h, w):
                raise ValueError(f"label {task} shape {mask.shape} != image {(h, w)}")


@dataclass
class GeometricTransform:
    """Invertible pixel-coordinate map: rotate about center, flip, scale, pad.

    ``apply`` maps source coords to derived coords in the order
    rotation -> horizontal flip -> uniform scale -> pad offsets. ``invert``
    is the exact inverse; round-tripping any in-bounds coordinate stays
    within 0.5 px (analytically it is exact up to float error).
    """

    scale: float = 1.0
    pad_left: int = 0
    pad_top: int = 0
    flip_h: bool = False
    rotation_deg: float = 0.0
    src_w: int = 0
    src_h: int = 0
    scale_y: float | None = None  # anisotropic only for crop transforms

    @property
    def _sy(self) -> float:
        return self.scale if self.scale_y is None else self.scale_y

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map (..., 2) source (x, y) coordinates into the derived image."""
        pts = np.asarray(xy, dtype=np.float64).reshape(-1, 2).copy()
        if self.rotation_deg:
            cx, cy = (self.src_w - 1) / 2.0, (self.src_h - 1) / 2.0
            th = math.radians(self.rotation_deg)
            dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
            pts[:, 0] = cx + math.cos(th) * dx - math.sin(th) * dy
            pts[:, 1] = cy + math.sin(th) * dx + math.cos(th) * dy
        if self.flip_h:
            pts[:, 0] = (self.src_w - 1) - pts[:, 0]
        pts[:, 0] = pts[:, 0] * self.scale + self.pad_left
        pts[:, 1] = pts[:, 1] * self._sy + self.pad_top
        return pts.reshape(np.asarray(xy, dtype=np.float64).shape)

    def invert(self, xy: np.ndarray) -> np.ndarray:
        """Map (..., 2) derived coordinates back into the source image."""
        pts = np.asarray(xy, dtype=np.float64).reshape(-1, 2).copy()
        pts[:, 0] = (pts[:, 0] - self.pad_left) / self.scale
        pts[:, 1] = (pts[:, 1] - self.pad_top) / self._sy
        if self.flip_h:
            pts[:, 0] = (self.src_w - 1) - pts[:, 0]
        if self.rotation_deg:
            cx, cy = (self.src_w - 1) / 2.0, (self.src_h - 1) / 2.0
            th = math.radians(-self.rotation_deg)
            dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
            pts[:, 0] = cx + math.cos(th) * dx - math.sin(th) * dy
            pts[:, 1] = cy + math.sin(th) * dx + math.cos(th) * dy
        return pts.reshape(np.asarray(xy, dtype=np.float64).shape)

    @staticmethod
    def identity(w: int, h: int) -> "GeometricTransform":
        return GeometricTransform(src_w=w, src_h=h)


def stack_layers(layers: list[np.ndarray], order: list[int] | None = None) -> np.ndarray:
    """Stack depth-projection layers into a 3-channel image.

    Fewer than 3 layers are filled by replicating the last one; more than 3
    keeps the first three of the requested order.
    """
    if not layers:
        raise ValueError("stack_layers needs at least one layer")
    shapes = {l.shape for l in layers}
    if len(shapes) != 1:
        raise ValueError(f"layer shapes differ: {sorted(shapes)}")
    if any(l.ndim != 2 for l in layers):
        raise ValueError("layers must be 2-D grayscale arrays")
    picked = [layers[i] for i in order] if order is not None else list(layers)
    while len(picked) < 3:
        picked.append(picked[-1])
    return np.stack(picked[:3], axis=-1)


def resize_and_pad(image: np.ndarray, target_side: int = 1024) -> tuple[np.ndarray, GeometricTransform]:
    """Uniformly scale so the longer side equals ``target_side``, zero-pad right/bottom."""
    h, w = image.shape[:2]
    if h <= 0 or w <= 0 or target_side <= 0:
        raise ValueError("dimensions must be positive")
    scale = target_side / max(h, w)
    new_w, new_h = round(w * scale), round(h * scale)
    if (new_w, new_h) == (w, h):
        resized = image.astype(np.float32, copy=True)
    else:
        resized = cv2.resize(image.astype(np.float32), (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    out = np.zeros((target_side, target_side, image.shape[2]), dtype=np.float32)
    out[:new_h, :new_w] = resized
    return out, GeometricTransform(scale=scale, src_w=w, src_h=h)


@dataclass
class AugmentConfig:
    """Which augmentations run and their limits. Zeroed limits disable a step."""

    hflip_p: float = 0.5
    photometric_p: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    rotate_p: float = 0.5
    rotate_limit_deg: float = 10.0

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(hflip_p=0.0, photometric_p=0.0, rotate_p=0.0)


def _affine_resample(arr: np.ndarray, flip_h: bool, rotation_deg: float, order: int) -> np.ndarray:
    """Resample so content at source p lands at GeometricTransform.apply(p)."""
    h, w = arr.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(rotation_deg)
    # inverse rotation in (row, col) order
    rot_inv = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    if flip_h:
        flip = np.array([[1.0, 0.0], [0.0, -1.0]])
        flip_off = np.array([0.0, w - 1.0])
    else:
        flip = np.eye(2)
        flip_off = np.zeros(2)
    center = np.array([cy, cx])
    matrix = rot_inv @ flip
    offset = rot_inv @ (flip_off - center) + center
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0)
    chans = [
        ndimage.affine_transform(arr[..., c], matrix, offset=offset, order=order, mode="constant", cval=0)
        for c in range(arr.shape[2])
    ]
    return np.stack(chans, axis=-1)


def augment(
    sample: OctaSample, rng: np.random.Generator, cfg: AugmentConfig
) -> tuple[OctaSample, GeometricTransform]:
    """Apply the identical spatial transform to image and all masks.

    Masks use nearest-neighbor resampling so their value sets are closed;
    photometric jitter touches the image only. Deterministic under ``rng``.
    """
    h, w = sample.image.shape[:2]
    flip_h = bool(rng.random() < cfg.hflip_p)
    rotation = float(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg)) if rng.random() < cfg.rotate_p else 0.0
    jitter = rng.random() < cfg.photometric_p
    brightness = float(rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)) if jitter else 0.0
    contrast = float(rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)) if jitter else 0.0

    tf = GeometricTransform(flip_h=flip_h, rotation_deg=rotation, src_w=w, src_h=h)

    image = sample.image
    if flip_h or rotation:
        image = _affine_resample(image, flip_h, rotation, order=1)
    if jitter:
        image = image * (1.0 + contrast) + brightness
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    labels = {}
    for task, mask in sample.labels.items():
        data = mask.data
        if flip_h or rotation:
            data = _affine_resample(data, flip_h, rotation, order=0)
        labels[task] = Mask(data, kind=mask.kind)

    return replace(sample, image=image, labels=labels), tf


def kfold_split(sample_ids: list[str], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Deterministic k-fold partition; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(sample_ids):
        raise ValueError(f"k={k} exceeds {len(sample_ids)} samples")
    ids = list(sample_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    folds = [list(part) for part in np.array_split(np.asarray(ids, dtype=object), k)]
    splits = []
    for i in range(k):
        val = folds[i]
        train = [x for j, fold in enumerate(folds) if j != i for x in fold]
        splits.append((train, val))
    return splits


CROP_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


def crop_local(
    image: np.ndarray, component_bbox: tuple[int, int, int, int]
) -> tuple[np.ndarray, GeometricTransform, float]:
    """Square crop around a component, resized back to the original size.

    The crop side is the smallest fraction f of the image width (among
    1/4, 1/2, 3/4, 1) with f*W >= max(bbox width, height); bboxes are
    exclusive-end (x0, y0, x1, y1). The returned transform maps crop-image
    coordinates back to original coordinates. A bbox larger than the image
    degrades to fraction 1, never an error.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = component_bbox
    extent = max(x1 - x0, y1 - y0)
    fraction = 1.0
    for f in CROP_FRACTIONS:
        if f * w >= extent:
            fraction = f
            break
    side = min(round(fraction * w), w, h)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    left = int(np.clip(round(cx - side / 2.0), 0, w - side))
    top = int(np.clip(round(cy - side / 2.0), 0, h - side))
    crop = image[top : top + side, left : left + side]
    if crop.shape[:2] != (h, w):
        resized = cv2.resize(crop.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    else:
        resized = crop.astype(np.float32, copy=True)
    tf = GeometricTransform(
        scale=side / w,
        scale_y=side / h,
        pad_left=left,
        pad_top=top,
        src_w=w,
        src_h=h,
    )
    return resized, tf, fraction


@dataclass
class DatasetLayout:
    """Maps a dataset tree: ordered layer dirs plus per-task label dirs."""

    layers: list[str]
    labels: dict[str, str]
    fov: str = "other"
    source: str = ""

    def __post_init__(self):
        if not self.layers:
            raise LayoutError("layout must list at least one layer directory")
        bad = set(self.labels) - set(TASKS)
        if bad:
            raise LayoutError(f"layout names unknown tasks: {sorted(bad)}")
        if self.fov not in FOV_TAGS:
            raise LayoutError(f"layout fov must be one of {FOV_TAGS}")

    @staticmethod
    def from_file(path: str | Path) -> "DatasetLayout":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise LayoutError(f"{path}: layout file must be a mapping")
        try:
            return DatasetLayout(
                layers=list(raw["layers"]),
                labels=dict(raw.get("labels", {})),
                fov=str(raw.get("fov", "other")),
                source=str(raw.get("source", "")),
            )
        except KeyError as exc:
            raise LayoutError(f"{path}: missing required key {exc}") from exc


@dataclass
class LoadIssue:
    """A non-fatal problem met while loading one sample."""

    sample_id: str
    kind: str  # "missing_label" | "shape_mismatch" | "unreadable"
    detail: str


_RASTER_EXTS = (".png", ".bmp")


def _read_gray(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img)


def _find_raster(dirpath: Path, stem: str) -> Path | None:
    for ext in _RASTER_EXTS:
        p = dirpath / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_dataset(root_dir: str | Path, layout: DatasetLayout) -> tuple[list[OctaSample], list[LoadIssue]]:
    """Load one OctaSample per subject id found in the first layer directory.

    Samples with missing declared labels are kept and reported via the
    issue list; per-sample read or shape errors are reported the same way
    instead of aborting the whole load.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} does not exist")
    layer_dirs = [root / d for d in layout.layers]
    label_dirs = {task: root / d for task, d in layout.labels.items()}
    for d in layer_dirs + list(label_dirs.values()):
        if not d.is_dir():
            raise LayoutError(f"declared directory {d} does not exist")

    ids = sorted(p.stem for p in layer_dirs[0].iterdir() if p.suffix.lower() in _RASTER_EXTS)
    if not ids:
        log.warning("no raster files found under %s", layer_dirs[0])

    samples: list[OctaSample] = []
    issues: list[LoadIssue] = []
    for sid in ids:
        layers = []
        failed = False
        for d in layer_dirs:
            p = _find_raster(d, sid)
            if p is None:
                issues.append(LoadIssue(sid, "unreadable", f"layer file missing in {d}"))
                failed = True
                break
            layers.append(_read_gray(p).astype(np.float32) / 255.0)
        if failed:
            continue
        if len({l.shape for l in layers}) != 1:
            issues.append(LoadIssue(sid, "shape_mismatch", f"layer shapes differ for {sid}"))
            continue
        image = stack_layers(layers)
        labels: dict[str, Mask] = {}
        ok = True
        for task, d in label_dirs.items():
            p = _find_raster(d, sid)
            if p is None:
                issues.append(LoadIssue(sid, "missing_label", f"{task}: no file in {d}"))
                continue
            data = _read_gray(p)
            if data.shape != image.shape[:2]:
                issues.append(LoadIssue(sid, "shape_mismatch", f"{p}: label {data.shape} vs image {image.shape[:2]}"))
                ok = False
                break
            labels[task] = Mask((data > 127).astype(np.uint8))
        if not ok:
            continue
        samples.append(OctaSample(id=sid, image=image, labels=labels, fov_mm=layout.fov, source=layout.source))
    return samples, issues
