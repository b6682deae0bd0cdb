"""Training objectives: Dice, soft-skeleton clDice, and their weighted blend.

All losses take soft masks (floats in [0, 1], any shape broadcastable to
H x W) and are differentiable in the prediction. FAZ and capillary train on
plain Dice; RV, artery, and vein use the combined Dice + clDice objective
because their tubular topology benefits from centerline agreement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-6

DICE_TASKS = ("FAZ", "capillary")
CLDICE_TASKS = ("RV", "artery", "vein")


@dataclass
class SkeletonConfig:
    iterations: int = 3  # must exceed half the max vessel thickness in px
    window: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("pooling window must be an odd integer >= 3")


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - 2|pred * gt| / (|pred| + |gt|), smoothed in the denominator.

    Empty prediction against empty ground truth is 0 by convention.
    """
    _check_pair(pred, gt)
    inter = (pred * gt).sum()
    total = pred.sum() + gt.sum()
    if float(total.detach()) == 0.0:
        return total * 0.0  # keeps the autograd graph alive
    return 1.0 - 2.0 * inter / (total + EPS)


def _min_pool(x: torch.Tensor, window: int) -> torch.Tensor:
    return -F.max_pool2d(-x, window, stride=1, padding=window // 2)


def _max_pool(x: torch.Tensor, window: int) -> torch.Tensor:
    return F.max_pool2d(x, window, stride=1, padding=window // 2)


def soft_skeleton(mask: torch.Tensor, cfg: SkeletonConfig | None = None) -> torch.Tensor:
    """Differentiable morphological centerline via iterated min/max pooling.

    Each round erodes the mask and accumulates the residual against its
    opening; a 1-px-wide binary curve is its own skeleton for any iteration
    count. Output stays in [0, 1].
    """
    cfg = cfg or SkeletonConfig()
    squeeze = mask.ndim == 2
    x = mask[None, None] if squeeze else mask
    opened = _max_pool(_min_pool(x, cfg.window), cfg.window)
    skel = F.relu(x - opened)
    for _ in range(cfg.iterations):
        x = _min_pool(x, cfg.window)
        opened = _max_pool(_min_pool(x, cfg.window), cfg.window)
        delta = F.relu(x - opened)
        skel = skel + F.relu(delta - skel * delta)
    return skel[0, 0] if squeeze else skel


def cl_dice_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    cfg: SkeletonConfig | None = None,
    precomputed_gt_skeleton: torch.Tensor | None = None,
) -> torch.Tensor:
    """Centerline Dice: harmonic mean of topology precision and sensitivity.

    ``precomputed_gt_skeleton`` skips ground-truth skeletonization where a
    centerline annotation already exists.
    """
    _check_pair(pred, gt)
    cfg = cfg or SkeletonConfig()
    pred_skel = soft_skeleton(pred, cfg)
    if precomputed_gt_skeleton is not None:
        _check_pair(precomputed_gt_skeleton, gt)
        gt_skel = precomputed_gt_skeleton
    else:
        gt_skel = soft_skeleton(gt, cfg)
    tprec = ((pred_skel * gt).sum() + EPS) / (pred_skel.sum() + EPS)
    tsens = ((gt_skel * pred).sum() + EPS) / (gt_skel.sum() + EPS)
    return 1.0 - 2.0 * tprec * tsens / (tprec + tsens)


def combined_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    cfg: SkeletonConfig | None = None,
    weights: tuple[float, float] = (0.8, 0.2),
    precomputed_gt_skeleton: torch.Tensor | None = None,
) -> torch.Tensor:
    """weights[0] * dice + weights[1] * clDice (default 0.8 / 0.2)."""
    w_dice, w_cl = weights
    if abs(w_dice + w_cl - 1.0) > 1e-9:
        warnings.warn(f"combined_loss weights {weights} do not sum to 1", stacklevel=2)
    out = w_dice * dice_loss(pred, gt)
    if w_cl != 0.0:
        out = out + w_cl * cl_dice_loss(pred, gt, cfg, precomputed_gt_skeleton)
    return out


def loss_for_task(task: str):
    """The per-task training objective selector."""
    if task in DICE_TASKS:
        return dice_loss
    if task in CLDICE_TASKS:
        return combined_loss
    raise ValueError(f"no loss defined for task {task!r}")
