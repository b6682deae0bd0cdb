"""Command-line entry point wiring all modules together.

Every subcommand resolves its configuration (flags override the config
file, which overrides defaults), writes a RunManifest into the run
directory first, then produces its outputs there.
"""

from __future__ import annotations

import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import yaml
from PIL import Image

from . import TASKS, __version__
from .dataio import DatasetLayout, Mask, load_dataset
from .fixtures import write_dataset
from .metrics import EmptyMaskError, dice_score, hausdorff, jaccard_score
from .promptgen import PromptConfig, PromptPointSet, generate_av, generate_global, generate_local
from .trainer import TrainConfig, cross_validate, fit, predict

ENV_CHECKPOINT = "OCTASEG_CHECKPOINT"
ENV_ADAPTER = "OCTASEG_ADAPTER"


def _fail(message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": message}) + "\n")
    sys.exit(code)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunDir:
    """Run directory with exactly one manifest, written before any output."""

    def __init__(self, path: str | None, command: str, config: dict):
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        self.path = Path(path) if path else Path("runs") / f"{command}-{stamp}"
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "version": __version__,
            "seed": config.get("seed"),
            "config": config,
            "started_at": _now(),
            "finished_at": None,
            "outputs": [],
        }
        self._write()

    def _write(self):
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, default=str)

    def add_output(self, p: Path) -> Path:
        self.manifest["outputs"].append(str(p))
        return p

    def finish(self):
        self.manifest["finished_at"] = _now()
        self._write()


def _read_mask(path: str) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return Mask((arr > 127).astype(np.uint8))


def _read_image(path: str) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img.convert("L") if img.mode not in ("L", "RGB") else img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr.astype(np.float32) / 255.0


def _resolve_train_config(config_path: str | None, overrides: dict) -> TrainConfig:
    raw: dict = {}
    if config_path:
        with open(config_path) as fh:
            raw = yaml.safe_load(fh) or {}
    raw.pop("dataset", None)
    prompt = dict(raw.get("prompt") or {})
    for key in ("n_pos_per_component", "n_total", "mode", "min_area_px",
                "neighborhood_radius_px", "av_opposite_fraction"):
        val = overrides.pop(f"prompt_{key}", None)
        if val is not None:
            prompt[key] = val
    if prompt:
        raw["prompt"] = prompt
    for key, val in overrides.items():
        if val is not None:
            raw[key] = val
    return TrainConfig.from_dict(raw)


def _load_samples(data_root: str, layout_path: str | None):
    layout_file = Path(layout_path) if layout_path else Path(data_root) / "layout.yaml"
    layout = DatasetLayout.from_file(layout_file)
    samples, issues = load_dataset(data_root, layout)
    for issue in issues:
        click.echo(f"load issue [{issue.kind}] {issue.sample_id}: {issue.detail}", err=True)
    return samples


def _load_model(checkpoint: str | None, adapter: str | None, cfg: TrainConfig):
    from .backbone import build_model, load_checkpoint
    from .lora import inject, load_adapter

    if checkpoint:
        model = load_checkpoint(checkpoint)
    else:
        model = build_model(cfg.variant, seed=cfg.seed)
    if adapter:
        inject(model, cfg.lora)
        load_adapter(model, adapter)
    return model


train_flags = [
    click.option("--task", type=click.Choice(TASKS), default=None, help="Segmentation task."),
    click.option("--variant", type=str, default=None, help="Backbone variant (tiny/full)."),
    click.option("--epochs", type=int, default=None, help="Training epochs (default 50)."),
    click.option("--batch-size", type=int, default=None, help="Batch size."),
    click.option("--seed", type=int, default=None, help="Run seed."),
    click.option("--folds", type=int, default=None, help="Cross-validation folds (default 10)."),
    click.option("--unfreeze-decoder/--freeze-decoder", "unfreeze_decoder", default=None,
                 help="Train the mask decoder alongside the adapters."),
    click.option("--prompt-mode", "prompt_mode", type=click.Choice(["global", "local"]), default=None,
                 help="Prompt generation mode."),
    click.option("--pos", "prompt_n_pos_per_component", type=int, default=None,
                 help="Positive points per component."),
    click.option("--total", "prompt_n_total", type=int, default=None, help="Total prompt points."),
    click.option("--min-area", "prompt_min_area_px", type=int, default=None,
                 help="Minimum component area in px (default 10)."),
    click.option("--radius", "prompt_neighborhood_radius_px", type=int, default=None,
                 help="Negative-point neighborhood radius in px (default 10)."),
    click.option("--opposite-fraction", "prompt_av_opposite_fraction", type=float, default=None,
                 help="Fraction of AV negatives on the opposite vessel (default 0.5)."),
]


def _apply_flags(fn):
    for flag in reversed(train_flags):
        fn = flag(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Promptable OCTA segmentation toolkit."""


@main.command("gen-fixtures")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--n", "n_samples", type=int, default=8, show_default=True, help="Number of samples.")
@click.option("--side", type=int, default=64, show_default=True, help="Image side in px.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tasks", type=str, default="RV,FAZ", show_default=True, help="Comma-separated tasks.")
def gen_fixtures(out_dir, n_samples, side, seed, tasks):
    """Write a synthetic vessel-tree dataset with a layout.yaml."""
    task_tuple = tuple(t.strip() for t in tasks.split(",") if t.strip())
    unknown = set(task_tuple) - set(TASKS)
    if unknown:
        raise click.UsageError(f"unknown tasks: {sorted(unknown)}")
    layout = write_dataset(out_dir, n_samples, side, seed, tasks=task_tuple)
    click.echo(f"wrote {n_samples} samples under {out_dir} (layout: {layout})")


@main.command("gen-prompts")
@click.option("--mask", "mask_path", type=click.Path(exists=True), help="Binary label raster.")
@click.option("--artery-mask", type=click.Path(exists=True), help="Artery mask (av mode).")
@click.option("--vein-mask", type=click.Path(exists=True), help="Vein mask (av mode).")
@click.option("--target", type=click.Choice(["artery", "vein"]), default="artery", show_default=True)
@click.option("--mode", type=click.Choice(["global", "local", "av"]), default="global", show_default=True)
@click.option("--pos", type=int, default=1, show_default=True, help="Positive points per component.")
@click.option("--total", type=int, default=5, show_default=True, help="Total prompt points.")
@click.option("--min-area", type=int, default=10, show_default=True)
@click.option("--radius", type=int, default=10, show_default=True)
@click.option("--opposite-fraction", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--image", "image_path", type=click.Path(exists=True), help="Image for the overlay figure.")
@click.option("--run-dir", type=click.Path(), default=None, help="Run directory (default runs/<cmd>-<stamp>).")
def gen_prompts(mask_path, artery_mask, vein_mask, target, mode, pos, total, min_area,
                radius, opposite_fraction, seed, image_path, run_dir):
    """Sample prompt points from a label mask.

    Writes points.txt (lines of `x y polarity`), points.json, and an
    overlay figure.
    """
    cfg = PromptConfig(
        n_pos_per_component=pos,
        n_total=total,
        mode="local" if mode == "local" else "global",
        min_area_px=min_area,
        neighborhood_radius_px=radius,
        av_opposite_fraction=opposite_fraction,
    )
    run = RunDir(run_dir, "gen-prompts", {"mode": mode, "pos": pos, "total": total, "seed": seed})
    rng = np.random.default_rng(seed)
    try:
        if mode == "av":
            if not (artery_mask and vein_mask):
                raise click.UsageError("av mode needs --artery-mask and --vein-mask")
            points = generate_av(_read_mask(artery_mask), _read_mask(vein_mask), target, cfg, rng)
            base_mask = _read_mask(artery_mask if target == "artery" else vein_mask)
        else:
            if not mask_path:
                raise click.UsageError("--mask is required for global/local mode")
            label = _read_mask(mask_path)
            points = generate_local(label, cfg, rng) if mode == "local" else generate_global(label, cfg, rng)
            base_mask = points.target_mask if mode == "local" else label
    except click.UsageError:
        raise
    except Exception as exc:
        run.finish()
        _fail(f"prompt generation failed: {exc}")
    txt = run.add_output(run.path / "points.txt")
    txt.write_text(points.to_lines() + ("\n" if points.points else ""))
    records = run.add_output(run.path / "points.json")
    with open(records, "w") as fh:
        json.dump({"points": points.to_dicts(), "notes": points.notes}, fh, indent=2)
    from .reporting import save_overlay

    image = _read_image(image_path) if image_path else np.stack([base_mask.data * 0.6] * 3, axis=-1)
    run.add_output(save_overlay(image, run.path / "points.png", mask=base_mask.data, points=points))
    for note in points.notes:
        click.echo(f"note: {note}", err=True)
    click.echo(f"{len(points.points)} points -> {txt}")
    run.finish()


@main.command("eval")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", type=click.Path(), default=None)
def eval_cmd(pred_path, gt_path, run_dir):
    """Compare a predicted mask raster against ground truth."""
    run = RunDir(run_dir, "eval", {"pred": pred_path, "gt": gt_path})
    pred, gt = _read_mask(pred_path), _read_mask(gt_path)
    try:
        dice = dice_score(pred, gt)
        jac = jaccard_score(pred, gt)
    except ValueError as exc:
        run.finish()
        _fail(str(exc))
    try:
        hd = hausdorff(pred, gt)
        hd_text = f"{hd:.4f}"
    except EmptyMaskError:
        hd, hd_text = None, "undefined"
    click.echo(f"dice {dice:.4f} jaccard {jac:.4f} hd {hd_text}")
    csv_path = run.add_output(run.path / "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write("dice,jaccard,hd_px\n")
        fh.write(f"{dice:.6f},{jac:.6f},{'' if hd is None else f'{hd:.6f}'}\n")
    run.finish()


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), help="YAML run config.")
@click.option("--data-root", type=click.Path(exists=True), help="Dataset root directory.")
@click.option("--layout", "layout_path", type=click.Path(exists=True), help="Layout file (default root/layout.yaml).")
@click.option("--dry-run", is_flag=True, help="Validate configuration without touching model state.")
@click.option("--run-dir", type=click.Path(), default=None)
@_apply_flags
def train(config_path, data_root, layout_path, dry_run, run_dir, **overrides):
    """Fine-tune adapters on a dataset (single split, no cross-validation)."""
    try:
        cfg = _resolve_train_config(config_path, overrides)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}")
    if not data_root and config_path:
        with open(config_path) as fh:
            data_root = (yaml.safe_load(fh) or {}).get("dataset", {}).get("root")
    if not data_root:
        raise click.UsageError("no dataset: pass --data-root or a config with dataset.root")
    run = RunDir(run_dir, "train", cfg.to_dict())
    if dry_run:
        click.echo("config ok (dry run)")
        click.echo(json.dumps(cfg.to_dict(), indent=2, default=str))
        run.finish()
        return
    try:
        samples = _load_samples(data_root, layout_path)
        samples = [s for s in samples if cfg.task in s.labels]
        if not samples:
            _fail(f"no samples with a {cfg.task} label under {data_root}")
        t0 = time.perf_counter()
        state, records = fit(samples, cfg, log_path=run.add_output(run.path / "train_log.csv"))
        from .lora import save_adapter
        from .reporting import save_loss_curve

        save_adapter(state.model, run.add_output(run.path / "adapter.bin"))
        run.add_output(save_loss_curve(records, run.path / "loss_curve.png"))
        click.echo(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s, "
                   f"final loss {records[-1]['loss']:.4f}")
        run.finish()
    except SystemExit:
        raise
    except Exception as exc:
        run.finish()
        _fail(f"training failed: {exc}")


@main.command("cross-validate")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data-root", type=click.Path(exists=True))
@click.option("--layout", "layout_path", type=click.Path(exists=True))
@click.option("--run-dir", type=click.Path(), default=None)
@_apply_flags
def cross_validate_cmd(config_path, data_root, layout_path, run_dir, **overrides):
    """k-fold cross-validation with per-fold checkpoints and reports."""
    try:
        cfg = _resolve_train_config(config_path, overrides)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}")
    if not data_root and config_path:
        with open(config_path) as fh:
            data_root = (yaml.safe_load(fh) or {}).get("dataset", {}).get("root")
    if not data_root:
        raise click.UsageError("no dataset: pass --data-root or a config with dataset.root")
    run = RunDir(run_dir, "cross-validate", cfg.to_dict())
    try:
        samples = _load_samples(data_root, layout_path)
        samples = [s for s in samples if cfg.task in s.labels]
        report = cross_validate(samples, cfg, run_dir=run.path)
        from .reporting import save_fold_metrics

        report.to_csv(run.add_output(run.path / "metrics.csv"))
        run.add_output(save_fold_metrics(report, run.path / "fold_metrics.png"))
        click.echo(report.table())
        run.finish()
    except SystemExit:
        raise
    except Exception as exc:
        run.finish()
        _fail(f"cross-validation failed: {exc}")


@main.command("predict")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--points", "points_path", type=click.Path(exists=True),
              help="Text file of `x y polarity` lines; omit for no prompts.")
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help=f"Backbone checkpoint (env {ENV_CHECKPOINT}).")
@click.option("--adapter", type=click.Path(exists=True), default=None,
              help=f"Adapter checkpoint (env {ENV_ADAPTER}).")
@click.option("--mode", type=click.Choice(["global", "local"]), default="global", show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--run-dir", type=click.Path(), default=None)
@_apply_flags
def predict_cmd(image_path, points_path, checkpoint, adapter, mode, threshold, run_dir, **overrides):
    """Segment one image with optional prompt points."""
    try:
        cfg = _resolve_train_config(None, overrides)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}")
    checkpoint = checkpoint or os.environ.get(ENV_CHECKPOINT) or None
    adapter = adapter or os.environ.get(ENV_ADAPTER) or None
    run = RunDir(run_dir, "predict", {"image": image_path, "checkpoint": checkpoint, "adapter": adapter})
    try:
        image = _read_image(image_path)
        points = PromptPointSet()
        if points_path:
            rows = [ln.split() for ln in Path(points_path).read_text().splitlines() if ln.strip()]
            points = PromptPointSet.from_dicts(
                [{"x": r[0], "y": r[1], "polarity": r[2]} for r in rows]
            )
        model = _load_model(checkpoint, adapter, cfg)
        mask, confidence = predict(model, image, points, mode=mode, threshold=threshold)
        out_png = run.add_output(run.path / "mask.png")
        Image.fromarray(mask.data * 255).save(out_png)
        from .reporting import save_overlay

        run.add_output(save_overlay(image, run.path / "overlay.png", mask=mask.data, points=points,
                                    title=f"confidence {confidence:.3f}"))
        with open(run.add_output(run.path / "prediction.json"), "w") as fh:
            json.dump({"confidence": confidence, "foreground_px": int(mask.data.sum())}, fh)
        click.echo(f"confidence {confidence:.4f} -> {out_png}")
        run.finish()
    except SystemExit:
        raise
    except Exception as exc:
        run.finish()
        _fail(f"prediction failed: {exc}")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help=f"Backbone checkpoint (env {ENV_CHECKPOINT}).")
@click.option("--adapter", type=click.Path(exists=True), default=None,
              help=f"Adapter checkpoint (env {ENV_ADAPTER}).")
@click.option("--task", type=click.Choice(TASKS), default="RV", show_default=True)
@click.option("--workers", type=int, default=2, show_default=True, help="Concurrent inference slots.")
@click.option("--seed", type=int, default=0, show_default=True, help="Init seed when no checkpoint.")
def serve(host, port, checkpoint, adapter, task, workers, seed):
    """Run the interactive segmentation HTTP service."""
    import uvicorn

    from .service import create_app, file_sha256

    checkpoint = checkpoint or os.environ.get(ENV_CHECKPOINT) or None
    adapter = adapter or os.environ.get(ENV_ADAPTER) or None
    cfg = TrainConfig(task=task, seed=seed)
    try:
        model = _load_model(checkpoint, adapter, cfg)
    except Exception as exc:
        _fail(f"model load failed: {exc}")
    app = create_app(
        model,
        default_task=task,
        checkpoint_hash=file_sha256(checkpoint) if checkpoint else "none",
        adapter_rank=cfg.lora.rank if adapter else None,
        max_workers=workers,
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
