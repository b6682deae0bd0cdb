"""Fine-tuning driver: warm-up LR schedule, per-batch prompt generation,
k-fold cross-validation, and the inference path back to label space.

Only the injected adapter matrices (plus optionally the decoder and prompt
encoder) receive gradients; everything else in the backbone stays frozen.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import TASKS
from .backbone import VARIANTS, SegmentationModel, build_model, select_best
from .dataio import AugmentConfig, GeometricTransform, Mask, OctaSample, augment, kfold_split, resize_and_pad
from .lora import LoraConfig, inject, load_adapter, save_adapter, trainable_parameters
from .losses import SkeletonConfig, combined_loss, dice_loss, loss_for_task
from .metrics import EmptyMaskError, MetricReport, SampleMetrics, aggregate, dice_score, hausdorff, jaccard_score
from .promptgen import PromptConfig, PromptPointSet, generate_av, generate_global, generate_local

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    """Warm-up then exponential decay; ``literal`` mode keeps the printed
    closed form that collapses to the floor by epoch 12."""

    warmup_epochs: int = 10
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    decay: float = 0.98
    mode: str = "interpreted"

    def __post_init__(self):
        if self.floor_lr > self.peak_lr:
            raise ValueError("floor_lr must not exceed peak_lr")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        if self.mode not in ("interpreted", "literal"):
            raise ValueError(f"schedule mode must be interpreted or literal, got {self.mode!r}")
        if self.mode == "literal":
            log.warning(
                "literal schedule mode collapses to the %g floor by epoch %d",
                self.floor_lr, self.warmup_epochs + 2,
            )


def lr_at_epoch(t: int, cfg: ScheduleConfig | None = None) -> float:
    """Learning rate for 1-based epoch t."""
    cfg = cfg or ScheduleConfig()
    if t < 1:
        raise ValueError("epochs are 1-based")
    w = cfg.warmup_epochs
    if t <= w:
        return cfg.peak_lr * t / w
    if cfg.mode == "literal":
        return max(cfg.floor_lr, 10.0 ** (-3.0 * cfg.decay * (t - w)))
    return max(cfg.floor_lr, cfg.peak_lr * cfg.decay ** (t - w))


@dataclass
class TrainConfig:
    task: str = "RV"
    variant: str = "tiny"
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    folds: int = 10
    unfreeze_decoder: bool = True
    unfreeze_prompt_encoder: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    prompt: PromptConfig = field(default_factory=lambda: PromptConfig(n_pos_per_component=1, n_total=4))
    lora: LoraConfig = field(default_factory=LoraConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if isinstance(raw.get("lora"), dict) and "targets" in raw["lora"]:
            raw["lora"] = {**raw["lora"], "targets": tuple(raw["lora"]["targets"])}
        for key, cls in (
            ("schedule", ScheduleConfig),
            ("prompt", PromptConfig),
            ("lora", LoraConfig),
            ("augmentation", AugmentConfig),
            ("skeleton", SkeletonConfig),
        ):
            if key in raw and isinstance(raw[key], dict):
                raw[key] = cls(**raw[key])
        if "betas" in raw:
            raw["betas"] = tuple(raw["betas"])
        return TrainConfig(**raw)


@dataclass
class BatchItem:
    """One augmented, encoder-ready sample."""

    sample: OctaSample
    enc_image: np.ndarray  # (S, S, 3)
    enc_transform: GeometricTransform  # original -> encoder space


@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: torch.optim.AdamW
    params: list[torch.nn.Parameter]


def prepare_model(cfg: TrainConfig, model: SegmentationModel | None = None) -> TrainState:
    """Build (or take) a backbone, inject adapters, and set up AdamW."""
    if model is None:
        model = build_model(cfg.variant, seed=cfg.seed)
    inject(model, cfg.lora, seed=cfg.seed)
    params = trainable_parameters(
        model,
        unfreeze_decoder=cfg.unfreeze_decoder,
        unfreeze_prompt_encoder=cfg.unfreeze_prompt_encoder,
    )
    optimizer = torch.optim.AdamW(params, lr=lr_at_epoch(1, cfg.schedule), betas=cfg.betas,
                                  weight_decay=cfg.weight_decay)
    return TrainState(model=model, optimizer=optimizer, params=params)


def make_batch(samples: list[OctaSample], cfg: TrainConfig, rng: np.random.Generator) -> list[BatchItem]:
    items = []
    for sample in samples:
        aug, _ = augment(sample, rng, cfg.augmentation)
        enc_image, tf = resize_and_pad(aug.image, cfg_input_side(cfg))
        items.append(BatchItem(sample=aug, enc_image=enc_image, enc_transform=tf))
    return items


def cfg_input_side(cfg: TrainConfig) -> int:
    return VARIANTS[cfg.variant].input_side


def _prompts_for(sample: OctaSample, cfg: TrainConfig, rng: np.random.Generator) -> tuple[PromptPointSet, Mask]:
    """Prompt points plus the supervision target for one sample."""
    label = sample.labels[cfg.task]
    if cfg.prompt.mode == "local":
        points = generate_local(label, cfg.prompt, rng)
        return points, points.target_mask
    if cfg.task in ("artery", "vein") and "artery" in sample.labels and "vein" in sample.labels:
        points = generate_av(sample.labels["artery"], sample.labels["vein"], cfg.task, cfg.prompt, rng)
    else:
        points = generate_global(label, cfg.prompt, rng)
    return points, label


def mask_to_label_space(soft: torch.Tensor, tf: GeometricTransform, out_hw: tuple[int, int],
                        input_side: int) -> torch.Tensor:
    """Differentiably resize a decoder-resolution soft mask back to label space."""
    h, w = out_hw
    x = soft[None, None]
    if x.shape[-1] != input_side:
        x = F.interpolate(x, size=(input_side, input_side), mode="bilinear", align_corners=False)
    valid_h, valid_w = round(h * tf.scale), round(w * tf.scale)
    x = x[..., :valid_h, :valid_w]
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return x[0, 0]


def _forward_loss(item: BatchItem, model: SegmentationModel, cfg: TrainConfig,
                  rng: np.random.Generator) -> torch.Tensor:
    points, target = _prompts_for(item.sample, cfg, rng)
    latent = model.encode_image(item.enc_image)
    prompt = model.encode_prompts(points, item.enc_transform)
    pred = model.decode_mask(latent, prompt)
    best, _ = select_best(pred)
    soft = mask_to_label_space(best, item.enc_transform, target.shape, cfg_input_side(cfg))
    gt = torch.from_numpy(target.data.astype(np.float32))
    loss_fn = loss_for_task(cfg.task)
    if loss_fn is combined_loss:
        return combined_loss(soft, gt, cfg.skeleton)
    return dice_loss(soft, gt)


def train_step(batch: list[BatchItem], state: TrainState, cfg: TrainConfig,
               rng: np.random.Generator) -> float:
    """One optimizer step on the mean batch loss; aborts on non-finite loss."""
    state.model.train()
    losses = [_forward_loss(item, state.model, cfg, rng) for item in batch]
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        ids = [item.sample.id for item in batch]
        raise RuntimeError(f"non-finite loss on batch {ids} (seed {cfg.seed}); aborting")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.model.eval()
    return float(loss.detach())


def fit(samples: list[OctaSample], cfg: TrainConfig, state: TrainState | None = None,
        rng: np.random.Generator | None = None, log_path: str | Path | None = None) -> tuple[TrainState, list[dict]]:
    """Train for cfg.epochs over the given samples; returns state and the
    per-epoch log records (epoch, lr, loss)."""
    state = state or prepare_model(cfg)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(epoch, cfg.schedule)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            batch = make_batch(chunk, cfg, rng)
            epoch_losses.append(train_step(batch, state, cfg, rng))
        records.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(epoch_losses))})
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "loss"])
            writer.writeheader()
            writer.writerows(records)
    return state, records


def predict(model: SegmentationModel, image: np.ndarray, points: PromptPointSet | list,
            mode: str = "global", threshold: float = 0.5) -> tuple[Mask, float]:
    """Preprocess, forward, select the best candidate, and map the thresholded
    mask back to the original resolution."""
    if not isinstance(points, PromptPointSet):
        points = PromptPointSet.from_dicts(
            [{"x": p[0], "y": p[1], "polarity": p[2]} for p in points]
        )
    h, w = image.shape[:2]
    bad = [i for i, p in enumerate(points.points) if not (0 <= p.x < w and 0 <= p.y < h)]
    if bad:
        raise ValueError(f"points outside the {h}x{w} image: indices {bad}")
    side = model.description.input_side
    enc_image, tf = resize_and_pad(image, side)
    with torch.no_grad():
        latent = model.encode_image(enc_image)
        prompt = model.encode_prompts(points, tf)
        pred = model.decode_mask(latent, prompt)
        best, confidence = select_best(pred)
        soft = mask_to_label_space(best, tf, (h, w), side)
    return Mask((soft.numpy() > threshold).astype(np.uint8)), confidence


def _sample_eval_rng(seed: int, sample_id: str) -> np.random.Generator:
    # fixed per-sample stream so validation prompts are comparable across epochs
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def evaluate(model: SegmentationModel, samples: list[OctaSample], cfg: TrainConfig,
             fold: int = 0) -> list[SampleMetrics]:
    out = []
    for sample in samples:
        rng = _sample_eval_rng(cfg.seed, sample.id)
        points, target = _prompts_for(sample, cfg, rng)
        pred_mask, _ = predict(model, sample.image, points, mode=cfg.prompt.mode)
        try:
            hd = hausdorff(pred_mask, target)
        except EmptyMaskError:
            hd = None
        out.append(
            SampleMetrics(
                sample_id=sample.id,
                fold=fold,
                dice=dice_score(pred_mask, target),
                jaccard=jaccard_score(pred_mask, target),
                hd_px=hd,
            )
        )
    return out


def cross_validate(samples: list[OctaSample], cfg: TrainConfig,
                   run_dir: str | Path | None = None) -> MetricReport:
    """Train one model per fold, evaluate on the held-out fold, aggregate.

    A failed fold is recorded in the report notes and the run continues.
    """
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in dataset")
    by_id = {s.id: s for s in samples}
    splits = kfold_split(ids, cfg.folds, cfg.seed)
    all_metrics: list[SampleMetrics] = []
    notes: list[str] = []
    for fold, (train_ids, val_ids) in enumerate(splits):
        try:
            fold_rng = np.random.default_rng([cfg.seed, fold])
            model = build_model(cfg.variant, seed=cfg.seed + fold)
            state = prepare_model(cfg, model=model)
            fold_dir = None
            if run_dir is not None:
                fold_dir = Path(run_dir) / f"fold{fold}"
                fold_dir.mkdir(parents=True, exist_ok=True)
            fit(
                [by_id[i] for i in train_ids], cfg, state=state, rng=fold_rng,
                log_path=None if fold_dir is None else fold_dir / "train_log.csv",
            )
            fold_metrics = evaluate(state.model, [by_id[i] for i in val_ids], cfg, fold=fold)
            all_metrics.extend(fold_metrics)
            if fold_dir is not None:
                save_adapter(state.model, fold_dir / "adapter.bin")
                with open(fold_dir / "metrics.records", "w") as fh:
                    for m in fold_metrics:
                        fh.write(json.dumps(asdict(m)) + "\n")
        except Exception as exc:  # fold failure must not kill the run
            log.exception("fold %d failed", fold)
            notes.append(f"fold {fold} incomplete: {exc}")
    report = aggregate(all_metrics, task=cfg.task)
    report.notes.extend(notes)
    return report


__all__ = [
    "ScheduleConfig",
    "TrainConfig",
    "TrainState",
    "BatchItem",
    "lr_at_epoch",
    "prepare_model",
    "make_batch",
    "train_step",
    "fit",
    "predict",
    "evaluate",
    "cross_validate",
    "load_adapter",
]
