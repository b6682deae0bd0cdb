"""Segmentation backbone: ViT image encoder, point-prompt encoder, mask decoder.

Two registered scales share a single block structure: ``tiny`` (randomly
initialized, CPU-sized, used by the whole test suite) and ``full``
(vit-h-sized, intended for loading pretrained weights from a checkpoint
file). Every attention block exposes a fused qkv projection of width 3*d,
the injection point for low-rank adapters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import GeometricTransform
from .promptgen import PromptPointSet

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderDescription:
    input_side: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_mask_candidates: int = 3
    decoder_upscales: int = 3

    def __post_init__(self):
        if self.input_side % self.patch_size != 0:
            raise ValueError("input_side must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even (positional encoding)")

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_size


VARIANTS = {
    "tiny": EncoderDescription(),
    "full": EncoderDescription(
        input_side=1024, patch_size=16, embed_dim=1280, depth=32, heads=16, decoder_upscales=2
    ),
}


class Attention(nn.Module):
    """Multi-head self-attention with a fused qkv projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # (b, heads, n, d/h)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, desc: EncoderDescription):
        super().__init__()
        self.desc = desc
        g = desc.grid
        self.patch_embed = nn.Conv2d(3, desc.embed_dim, desc.patch_size, stride=desc.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, desc.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(desc.embed_dim, desc.heads, desc.mlp_ratio) for _ in range(desc.depth))
        self.norm = nn.LayerNorm(desc.embed_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> latent token grid (B, grid*grid, d)."""
        x = self.patch_embed(image)  # (B, d, g, g)
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class PromptEncoder(nn.Module):
    """Fourier positional encoding of (x, y) plus a learned polarity embedding."""

    def __init__(self, desc: EncoderDescription):
        super().__init__()
        self.desc = desc
        self.register_buffer("pe_freqs", torch.randn(2, desc.embed_dim // 2))
        self.polarity_embed = nn.Embedding(2, desc.embed_dim)
        self.no_prompt = nn.Parameter(torch.zeros(1, desc.embed_dim))
        nn.init.trunc_normal_(self.no_prompt, std=0.02)

    def positional(self, coords01: torch.Tensor) -> torch.Tensor:
        proj = (2.0 * coords01 - 1.0) @ self.pe_freqs * (2.0 * torch.pi)
        return torch.cat([proj.sin(), proj.cos()], dim=-1)

    def forward(self, coords01: torch.Tensor, polarities: torch.Tensor) -> torch.Tensor:
        """(n, 2) coords in [0,1] and (n,) polarities -> (n, d); n=0 gives the
        dedicated no-prompt token."""
        if coords01.numel() == 0:
            return self.no_prompt
        return self.positional(coords01) + self.polarity_embed(polarities)


class TwoWayLayer(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0])
        t = self.norm2(t + self.cross_t2i(t, image, image, need_weights=False)[0])
        t = self.norm3(t + self.mlp(t))
        image = self.norm4(image + self.cross_i2t(image, t, t, need_weights=False)[0])
        return t, image


class MaskDecoder(nn.Module):
    def __init__(self, desc: EncoderDescription, depth: int = 2):
        super().__init__()
        self.desc = desc
        d = desc.embed_dim
        self.conf_token = nn.Parameter(torch.zeros(1, d))
        self.mask_tokens = nn.Parameter(torch.zeros(desc.num_mask_candidates, d))
        nn.init.trunc_normal_(self.conf_token, std=0.02)
        nn.init.trunc_normal_(self.mask_tokens, std=0.02)
        self.layers = nn.ModuleList(TwoWayLayer(d, desc.heads) for _ in range(depth))

        ups: list[nn.Module] = [nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(1, d), nn.GELU()]
        ch = d
        for i in range(desc.decoder_upscales):
            nxt = max(16, ch // 2)
            ups.append(nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2))
            ups.append(nn.GroupNorm(1, nxt))
            if i < desc.decoder_upscales - 1:
                ups.append(nn.GELU())
            ch = nxt
        self.upscale = nn.Sequential(*ups)
        self.out_channels = ch
        self.hypernet = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, ch))
        self.conf_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, desc.num_mask_candidates))
        # logits are normalized over space per candidate, so a uniform
        # all-foreground output is unreachable; gain sharpens boundaries and
        # bias absorbs the foreground/background imbalance
        self.logit_gain = nn.Parameter(torch.full((desc.num_mask_candidates,), 4.0))
        self.logit_bias = nn.Parameter(torch.zeros(desc.num_mask_candidates))

    def forward(self, latent: torch.Tensor, prompts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """latent (n_patches, d) + prompts (n_prompts, d) -> soft masks
        (M, R, R) in [0,1] and confidences (M,)."""
        g = self.desc.grid
        d = self.desc.embed_dim
        if latent.shape[-1] != d or prompts.shape[-1] != d:
            raise ValueError(f"token width mismatch: expected {d}")
        image = latent[None]  # (1, n, d)
        tokens = torch.cat([self.conf_token, self.mask_tokens, prompts], dim=0)[None]
        for layer in self.layers:
            tokens, image = layer(tokens, image)
        conf_out = tokens[0, 0]
        mask_out = tokens[0, 1 : 1 + self.desc.num_mask_candidates]

        grid = image[0].transpose(0, 1).reshape(1, d, g, g)
        embedding = self.upscale(grid)  # (1, C, R, R)
        weights = self.hypernet(mask_out)  # (M, C)
        logits = torch.einsum("mc,chw->mhw", weights, embedding[0])
        logits = F.layer_norm(logits, logits.shape[-2:])
        logits = logits * self.logit_gain[:, None, None] + self.logit_bias[:, None, None]
        masks = torch.sigmoid(logits)
        confidences = self.conf_head(conf_out)
        return masks, confidences


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor  # (n, d); n == 1 no-prompt token when empty
    n_points: int


@dataclass
class MaskPrediction:
    masks: torch.Tensor  # (M, R, R) soft masks in [0, 1]
    confidences: torch.Tensor  # (M,)


class SegmentationModel(nn.Module):
    """The encoder / prompt encoder / decoder triad behind one description."""

    def __init__(self, desc: EncoderDescription):
        super().__init__()
        self.description = desc
        self.image_encoder = ImageEncoder(desc)
        self.prompt_encoder = PromptEncoder(desc)
        self.mask_decoder = MaskDecoder(desc)

    def encode_image(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        """(S, S, 3) image in [0,1] -> latent (grid*grid, d)."""
        s = self.description.input_side
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        if image.shape != (s, s, 3):
            raise ValueError(f"expected ({s}, {s}, 3) image, got {tuple(image.shape)}")
        image = image.to(dtype=next(self.parameters()).dtype)
        return self.image_encoder(image.permute(2, 0, 1)[None])[0]

    def encode_prompts(self, points: PromptPointSet, transform: GeometricTransform) -> PromptEmbedding:
        """Map original-space points into encoder space and embed them."""
        s = self.description.input_side
        if not points.points:
            return PromptEmbedding(tokens=self.prompt_encoder(torch.empty(0, 2), torch.empty(0)), n_points=0)
        xy = np.array([[p.x, p.y] for p in points.points], dtype=np.float64)
        mapped = transform.apply(xy)
        bad = [i for i, (x, y) in enumerate(mapped) if not (0 <= x < s and 0 <= y < s)]
        if bad:
            raise ValueError(f"points map outside the {s}x{s} encoder input: indices {bad}")
        ref = next(self.parameters())
        coords01 = torch.from_numpy(mapped / s).to(dtype=ref.dtype, device=ref.device)
        polarity = torch.tensor([p.polarity for p in points.points], dtype=torch.long, device=ref.device)
        tokens = self.prompt_encoder(coords01, polarity)
        return PromptEmbedding(tokens=tokens, n_points=len(points.points))

    def decode_mask(self, latent: torch.Tensor, prompt: PromptEmbedding) -> MaskPrediction:
        masks, confidences = self.mask_decoder(latent, prompt.tokens)
        return MaskPrediction(masks=masks, confidences=confidences)


def select_best(pred: MaskPrediction) -> tuple[torch.Tensor, float]:
    """Highest-confidence candidate; ties break to the lowest index."""
    conf = pred.confidences.detach().cpu().numpy()
    if conf.size == 0:
        raise ValueError("prediction has no candidates")
    idx = int(np.argmax(conf))
    return pred.masks[idx], float(conf[idx])


def build_model(variant: str = "tiny", seed: int = 0, desc: EncoderDescription | None = None) -> SegmentationModel:
    """Construct a model with deterministic initialization under ``seed``."""
    if desc is None:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; options: {sorted(VARIANTS)}")
        desc = VARIANTS[variant]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SegmentationModel(desc)
    model.eval()
    return model


def save_checkpoint(model: SegmentationModel, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "description": asdict(model.description),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> SegmentationModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    desc = EncoderDescription(**payload["description"])
    model = SegmentationModel(desc)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
