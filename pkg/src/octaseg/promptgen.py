"""Prompt-point generation from segmentation labels.

Positive points are sampled inside connected components of the label
(8-connectivity), negative points in a background band around them. Global
mode prompts every kept component; local mode picks a single component and
returns it as the supervision target; artery-vein mode additionally places
negatives on the opposite vessel class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataio import Mask

EIGHT_CONN = np.ones((3, 3), dtype=bool)


class NoComponentsError(ValueError):
    """The label has no kept components but points were requested."""


@dataclass(frozen=True)
class PromptPoint:
    x: int
    y: int
    polarity: int  # 1 positive (foreground), 0 negative (background)


@dataclass
class PromptConfig:
    n_pos_per_component: int = 1
    n_total: int = 0
    mode: str = "global"  # "global" or "local"
    min_area_px: int = 10
    neighborhood_radius_px: int = 10
    av_opposite_fraction: float = 0.5

    def __post_init__(self):
        if self.n_pos_per_component < 0 or self.n_total < 0:
            raise ValueError("point counts must be non-negative")
        if self.mode not in ("global", "local"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.neighborhood_radius_px < 1:
            raise ValueError("neighborhood radius must be >= 1")
        if not 0.0 <= self.av_opposite_fraction <= 1.0:
            raise ValueError("av_opposite_fraction must be in [0, 1]")


@dataclass
class PromptPointSet:
    """Ordered prompt points: positives first, then negatives."""

    points: list[PromptPoint] = field(default_factory=list)
    target_mask: Mask | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def positives(self) -> list[PromptPoint]:
        return [p for p in self.points if p.polarity == 1]

    @property
    def negatives(self) -> list[PromptPoint]:
        return [p for p in self.points if p.polarity == 0]

    def to_lines(self) -> str:
        return "\n".join(f"{p.x} {p.y} {p.polarity}" for p in self.points)

    def to_dicts(self) -> list[dict]:
        return [{"x": p.x, "y": p.y, "polarity": p.polarity} for p in self.points]

    @staticmethod
    def from_dicts(records: list[dict]) -> "PromptPointSet":
        pts = [PromptPoint(int(r["x"]), int(r["y"]), int(r["polarity"])) for r in records]
        return PromptPointSet(points=pts)


@dataclass
class Component:
    id: int
    area_px: int
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), exclusive end


@dataclass
class ComponentMap:
    """Labeling of a binary mask: 0 background, 1..K component ids."""

    labels: np.ndarray
    components: list[Component]

    def coords(self, component_id: int) -> np.ndarray:
        """(N, 2) array of (x, y) pixel coordinates in row-major order."""
        rows, cols = np.nonzero(self.labels == component_id)
        return np.stack([cols, rows], axis=1)

    def foreground(self) -> np.ndarray:
        return self.labels > 0


def _as_binary(mask: Mask | np.ndarray) -> np.ndarray:
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    values = set(np.unique(data).tolist())
    if not values <= {0, 1}:
        raise ValueError("component labeling expects a binary mask")
    return data.astype(np.uint8)


def label_components(mask: Mask | np.ndarray) -> ComponentMap:
    """8-connected maximal components, ids ordered by first pixel row-major."""
    data = _as_binary(mask)
    raw, n = ndimage.label(data, structure=EIGHT_CONN)
    if n == 0:
        return ComponentMap(labels=raw.astype(np.int32), components=[])
    # reorder ids by the flat index of each component's first pixel
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nonzero = np.nonzero(flat)[0]
    # reversed so earlier indices win the final write
    first[flat[nonzero[::-1]]] = nonzero[::-1]
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    labels = remap[raw]
    return ComponentMap(labels=labels, components=_summarize(labels, n))


def _summarize(labels: np.ndarray, n: int) -> list[Component]:
    comps = []
    slices = ndimage.find_objects(labels, max_label=n)
    for cid, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        area = int(np.count_nonzero(labels[sl] == cid))
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        comps.append(Component(id=cid, area_px=area, bbox=(x0, y0, x1, y1)))
    return comps


def filter_small(cm: ComponentMap, min_area_px: int) -> ComponentMap:
    """Drop components with area < min_area_px; surviving ids recompacted."""
    if min_area_px < 0:
        raise ValueError("min_area_px must be >= 0")
    keep = [c for c in cm.components if c.area_px >= min_area_px]
    if len(keep) == len(cm.components):
        return cm
    remap = np.zeros(len(cm.components) + 1, dtype=np.int32)
    for new_id, comp in enumerate(keep, start=1):
        remap[comp.id] = new_id
    labels = remap[cm.labels]
    comps = [Component(id=i, area_px=c.area_px, bbox=c.bbox) for i, c in enumerate(keep, start=1)]
    return ComponentMap(labels=labels, components=comps)


def neighborhood(cm: ComponentMap, ids: set[int], radius_px: int) -> np.ndarray:
    """Background pixels within chessboard distance <= radius of the given components.

    Foreground pixels of every kept component are excluded. Returns (N, 2)
    (x, y) coordinates in row-major order.
    """
    if not ids:
        raise ValueError("ids must be nonempty")
    if radius_px < 1:
        raise ValueError("radius must be >= 1")
    seed = np.isin(cm.labels, list(ids))
    band = ndimage.binary_dilation(seed, structure=EIGHT_CONN, iterations=radius_px)
    band &= cm.labels == 0
    rows, cols = np.nonzero(band)
    return np.stack([cols, rows], axis=1)


def _kept_map(label: Mask | np.ndarray, cfg: PromptConfig) -> ComponentMap:
    return filter_small(label_components(label), cfg.min_area_px)


def _sample_positives(
    cm: ComponentMap, ids: list[int], n_pos: int, rng: np.random.Generator, notes: list[str]
) -> list[PromptPoint]:
    """Per component: n_pos uniform draws without replacement, or every pixel
    when the component is smaller than n_pos (no rng consumed then)."""
    out: list[PromptPoint] = []
    for cid in ids:
        coords = cm.coords(cid)
        if len(coords) <= n_pos:
            chosen = coords
            if len(coords) < n_pos:
                notes.append(f"component {cid}: area {len(coords)} < n_pos {n_pos}, took all pixels")
        else:
            idx = rng.choice(len(coords), size=n_pos, replace=False)
            chosen = coords[idx]
        out.extend(PromptPoint(int(x), int(y), 1) for x, y in chosen)
    return out


def _sample_from(
    coords: np.ndarray, count: int, rng: np.random.Generator, notes: list[str], pool_name: str
) -> list[PromptPoint]:
    if count <= 0:
        return []
    if len(coords) == 0:
        notes.append(f"{pool_name} empty, {count} negative points dropped")
        return []
    if len(coords) >= count:
        idx = rng.choice(len(coords), size=count, replace=False)
    else:
        idx = rng.choice(len(coords), size=count, replace=True)
        notes.append(f"{pool_name} smaller than {count}, sampled with replacement")
    return [PromptPoint(int(x), int(y), 0) for x, y in coords[idx]]


def generate_global(label: Mask | np.ndarray, cfg: PromptConfig, rng: np.random.Generator) -> PromptPointSet:
    """Prompt every kept component with n_pos positives, pad with negatives to n_total."""
    notes: list[str] = []
    cm = _kept_map(label, cfg)
    if not cm.components:
        if cfg.n_total == 0:
            return PromptPointSet()
        raise NoComponentsError("no components")
    if cfg.n_total == 0 and cfg.n_pos_per_component == 0:
        return PromptPointSet()
    ids = [c.id for c in cm.components]
    positives = _sample_positives(cm, ids, cfg.n_pos_per_component, rng, notes)
    n_neg = cfg.n_total - len(positives)
    negatives: list[PromptPoint] = []
    if n_neg > 0:
        band = neighborhood(cm, set(ids), cfg.neighborhood_radius_px)
        negatives = _sample_from(band, n_neg, rng, notes, "neighborhood")
    elif n_neg < 0:
        notes.append(f"{len(positives)} positives exceed n_total {cfg.n_total}, negatives truncated to zero")
    return PromptPointSet(points=positives + negatives, notes=notes)


def generate_local(label: Mask | np.ndarray, cfg: PromptConfig, rng: np.random.Generator) -> PromptPointSet:
    """Prompt one uniformly chosen component; its mask becomes the target."""
    notes: list[str] = []
    cm = _kept_map(label, cfg)
    if not cm.components:
        raise NoComponentsError("no components")
    chosen = cm.components[int(rng.integers(len(cm.components)))]
    positives = _sample_positives(cm, [chosen.id], cfg.n_pos_per_component, rng, notes)
    n_neg = cfg.n_total - cfg.n_pos_per_component
    negatives: list[PromptPoint] = []
    if n_neg > 0:
        band = neighborhood(cm, {chosen.id}, cfg.neighborhood_radius_px)
        negatives = _sample_from(band, n_neg, rng, notes, "neighborhood")
    elif n_neg < 0:
        notes.append(f"n_pos {cfg.n_pos_per_component} exceeds n_total {cfg.n_total}, no negatives")
    target = Mask((cm.labels == chosen.id).astype(np.uint8))
    return PromptPointSet(points=positives + negatives, target_mask=target, notes=notes)


def generate_av(
    artery: Mask | np.ndarray,
    vein: Mask | np.ndarray,
    target: str,
    cfg: PromptConfig,
    rng: np.random.Generator,
) -> PromptPointSet:
    """Artery-vein prompting: negatives split between the opposite vessel mask
    and the background neighborhood by ``av_opposite_fraction``.

    With fraction 0 this consumes the rng exactly like generate_global on the
    target mask alone.
    """
    if target not in ("artery", "vein"):
        raise ValueError(f"target must be artery or vein, got {target!r}")
    a, v = _as_binary(artery), _as_binary(vein)
    if a.shape != v.shape:
        raise ValueError(f"artery {a.shape} and vein {v.shape} shapes differ")
    tgt, other = (a, v) if target == "artery" else (v, a)
    notes: list[str] = []
    cm = _kept_map(tgt, cfg)
    if not cm.components:
        raise NoComponentsError(f"target mask {target} has no components")
    ids = [c.id for c in cm.components]
    positives = _sample_positives(cm, ids, cfg.n_pos_per_component, rng, notes)
    n_neg = cfg.n_total - len(positives)
    negatives: list[PromptPoint] = []
    if n_neg > 0:
        n_opp = round(cfg.av_opposite_fraction * n_neg)
        n_bg = n_neg - n_opp
        if n_opp > 0:
            rows, cols = np.nonzero((other > 0) & ~cm.foreground())
            opp_coords = np.stack([cols, rows], axis=1)
            opp = _sample_from(opp_coords, n_opp, rng, notes, "opposite-vessel pool")
            if len(opp) < n_opp:
                n_bg += n_opp - len(opp)
            negatives.extend(opp)
        if n_bg > 0:
            band = neighborhood(cm, set(ids), cfg.neighborhood_radius_px)
            negatives.extend(_sample_from(band, n_bg, rng, notes, "neighborhood"))
    elif n_neg < 0:
        notes.append(f"{len(positives)} positives exceed n_total {cfg.n_total}, negatives truncated to zero")
    return PromptPointSet(points=positives + negatives, notes=notes)


def recommend_total(task: str, dataset_stats: dict[str, int], n_pos: int) -> int:
    """Total point budget for a task: n_pos * max component count, rounded up
    to a multiple of 5 (below 50) or 10, always leaving room for a negative."""
    if task not in dataset_stats:
        raise KeyError(f"no component statistics for task {task!r}")
    base = n_pos * dataset_stats[task]
    step = 5 if base < 50 else 10
    total = ((base + step - 1) // step) * step
    if total < base + 1:
        total += step
    return total
