"""Low-rank adapters for the image encoder's fused qkv projections.

Injection freezes every base parameter and adds trainable B(A(x)) bypasses
into the q and v slices of each attention block's qkv output. B starts at
zero so the adapted model is output-identical to the base until training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import SegmentationModel

ADAPTER_VERSION = 1


@dataclass
class LoraConfig:
    rank: int = 4
    targets: tuple[str, ...] = ("q", "v")
    scale: float = 1.0
    fused_add: bool = False  # literal mode: add both deltas to every qkv slice

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.targets or set(self.targets) - {"q", "v"}:
            raise ValueError("targets must be a nonempty subset of {'q', 'v'}")


class LoraQKV(nn.Module):
    """Wraps a fused qkv linear; adds low-rank deltas to the q/v slices."""

    def __init__(self, base: nn.Linear, cfg: LoraConfig, generator: torch.Generator | None = None):
        super().__init__()
        dim = base.in_features
        if base.out_features != 3 * dim:
            raise ValueError(f"expected fused qkv linear ({dim} -> {3 * dim}), got {base.out_features}")
        if cfg.rank >= dim:
            raise ValueError(f"rank {cfg.rank} must be smaller than dim {dim}")
        self.base = base
        self.dim = dim
        self.cfg = cfg
        for t in cfg.targets:
            a = nn.Linear(dim, cfg.rank, bias=False)
            b = nn.Linear(cfg.rank, dim, bias=False)
            with torch.no_grad():
                a.weight.copy_(torch.randn(a.weight.shape, generator=generator) * 0.01)
                b.weight.zero_()
            self.add_module(f"a_{t}", a)
            self.add_module(f"b_{t}", b)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        deltas = {}
        for t in self.cfg.targets:
            a = getattr(self, f"a_{t}")
            b = getattr(self, f"b_{t}")
            deltas[t] = b(a(x)) * self.cfg.scale
        if self.cfg.fused_add:
            total = sum(deltas.values())
            return y + torch.cat([total, total, total], dim=-1)
        slices = {"q": slice(0, self.dim), "v": slice(2 * self.dim, 3 * self.dim)}
        out = y.clone()
        for t, delta in deltas.items():
            out[..., slices[t]] = y[..., slices[t]] + delta
        return out

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for name, mod in self.named_children() if name != "base" for p in mod.parameters()]


@dataclass
class AdapterState:
    """Handle to the injected per-block low-rank matrices."""

    cfg: LoraConfig
    blocks: list[LoraQKV] = field(default_factory=list)

    def parameters(self) -> list[nn.Parameter]:
        return [p for blk in self.blocks for p in blk.adapter_parameters()]


def inject(model: SegmentationModel, cfg: LoraConfig, seed: int = 0) -> tuple[SegmentationModel, AdapterState]:
    """Freeze the whole model, then wrap every attention block's fused qkv.

    Adapter A matrices initialize from a generator seeded with ``seed`` so
    (config, seed) fully determines the injected state.
    """
    blocks = list(model.image_encoder.blocks)
    for blk in blocks:
        if not hasattr(blk, "attn") or not isinstance(getattr(blk.attn, "qkv", None), nn.Linear):
            raise ValueError("model has a block without a fused qkv projection")
    for p in model.parameters():
        p.requires_grad_(False)
    generator = torch.Generator().manual_seed(seed)
    wrapped = []
    for blk in blocks:
        lqkv = LoraQKV(blk.attn.qkv, cfg, generator=generator)
        blk.attn.qkv = lqkv
        wrapped.append(lqkv)
    model._lora_state = AdapterState(cfg=cfg, blocks=wrapped)
    return model, model._lora_state


def adapter_state(model: SegmentationModel) -> AdapterState:
    state = getattr(model, "_lora_state", None)
    if state is None:
        raise ValueError("no trainable parameters: model has no injected adapter")
    return state


def trainable_parameters(
    model: SegmentationModel,
    unfreeze_decoder: bool = False,
    unfreeze_prompt_encoder: bool = False,
) -> list[nn.Parameter]:
    """Adapter matrices, plus decoder/prompt-encoder weights when unfrozen.

    Also flips requires_grad so the returned set is exactly the trainable
    partition of the model.
    """
    state = adapter_state(model)
    params = state.parameters()
    for p in params:
        p.requires_grad_(True)
    if unfreeze_decoder:
        for p in model.mask_decoder.parameters():
            p.requires_grad_(True)
        params += list(model.mask_decoder.parameters())
    if unfreeze_prompt_encoder:
        for p in model.prompt_encoder.parameters():
            p.requires_grad_(True)
        params += list(model.prompt_encoder.parameters())
    return params


def save_adapter(model: SegmentationModel, path) -> None:
    state = adapter_state(model)
    matrices = {}
    for i, blk in enumerate(state.blocks):
        matrices[i] = {
            name: getattr(blk, name).weight.detach().clone()
            for t in state.cfg.targets
            for name in (f"a_{t}", f"b_{t}")
        }
    torch.save(
        {
            "format_version": ADAPTER_VERSION,
            "rank": state.cfg.rank,
            "targets": list(state.cfg.targets),
            "scale": state.cfg.scale,
            "fused_add": state.cfg.fused_add,
            "n_blocks": len(state.blocks),
            "embed_dim": state.blocks[0].dim if state.blocks else 0,
            "matrices": matrices,
        },
        path,
    )


def load_adapter(model: SegmentationModel, path) -> None:
    """Restore adapter matrices; validates everything before touching the model."""
    state = adapter_state(model)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable adapter file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != ADAPTER_VERSION:
        raise ValueError(f"{path}: not a version-{ADAPTER_VERSION} adapter file")
    if payload["rank"] != state.cfg.rank:
        raise ValueError(f"{path}: adapter rank {payload['rank']} != configured rank {state.cfg.rank}")
    if tuple(payload["targets"]) != state.cfg.targets:
        raise ValueError(f"{path}: adapter targets {payload['targets']} != {list(state.cfg.targets)}")
    if payload["n_blocks"] != len(state.blocks):
        raise ValueError(f"{path}: {payload['n_blocks']} blocks != model's {len(state.blocks)}")
    staged = []
    for i, blk in enumerate(state.blocks):
        for t in state.cfg.targets:
            for name in (f"a_{t}", f"b_{t}"):
                tensor = payload["matrices"][i][name]
                expected = getattr(blk, name).weight.shape
                if tensor.shape != expected:
                    raise ValueError(f"{path}: block {i} {name} shape {tuple(tensor.shape)}, expected {tuple(expected)}")
                staged.append((getattr(blk, name).weight, tensor))
    with torch.no_grad():
        for param, tensor in staged:
            param.copy_(tensor)
