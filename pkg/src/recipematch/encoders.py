"""Patch-embedding image transformer, hierarchical recipe encoder, projections."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import PAD_ID, RecipeBatch
from .layers import DecoderBlock, EncoderBlock, init_weights
from .masking import MaskSpec

COMPONENTS = ("title", "ingredients", "instructions")


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 2
    heads: int = 2
    hidden_dim: int = 64

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class RecipeEncoderConfig:
    vocab_size: int = 128
    component_depth: int = 1
    component_heads: int = 2
    component_hidden: int = 64
    fusion_depth: int = 1
    fusion_heads: int = 2
    max_len: tuple[int, int, int] = (16, 64, 128)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``B x C x H x W`` -> ``B x P x (patch_size**2 * C)`` in row-major patch order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // p) * (w // p), p * p * c)


class ImageEncoder(nn.Module):
    """ViT-style encoder. With a mask it encodes only CLS plus visible patches."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.patch_size**2 * cfg.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.apply(init_weights)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    @property
    def n_patches(self) -> int:
        return self.cfg.n_patches

    def forward(self, images: torch.Tensor, mask: MaskSpec | None = None) -> torch.Tensor:
        x = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        if mask is not None and mask.n_masked:
            if mask.n_patches != self.n_patches:
                raise ValueError(f"mask built for {mask.n_patches} patches, encoder has {self.n_patches}")
            idx = mask.visible_indices().unsqueeze(-1).expand(-1, -1, x.shape[-1])
            x = x.gather(1, idx)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class RecipeEncoder(nn.Module):
    """Hierarchical recipe encoder.

    One transformer encoder per component (title, ingredients, instructions),
    then a per-component fusion decoder whose cross-attention reads the other
    two components. Output is the component outputs concatenated along the
    sequence axis together with the token validity mask.
    """

    def __init__(self, cfg: RecipeEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.component_hidden
        self.embed = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD_ID)
        self.pos = nn.ParameterDict({
            name: nn.Parameter(torch.zeros(1, n, d)) for name, n in zip(COMPONENTS, cfg.max_len)
        })
        self.encoders = nn.ModuleDict({
            name: nn.ModuleList(EncoderBlock(d, cfg.component_heads) for _ in range(cfg.component_depth))
            for name in COMPONENTS
        })
        self.fusion = nn.ModuleDict({
            name: nn.ModuleList(DecoderBlock(d, cfg.fusion_heads) for _ in range(cfg.fusion_depth))
            for name in COMPONENTS
        })
        self.norm = nn.LayerNorm(d)
        self.positional_off: set[str] = set()
        self.apply(init_weights)
        for p in self.pos.values():
            nn.init.normal_(p, std=0.02)

    def forward(self, recipes: RecipeBatch) -> tuple[torch.Tensor, torch.Tensor]:
        feats, masks = [], []
        for name, (ids, valid) in zip(COMPONENTS, recipes.components):
            if ids.shape[1] > self.pos[name].shape[1]:
                raise ValueError(f"{name} length {ids.shape[1]} exceeds its cap; truncate upstream")
            x = self.embed(ids)
            if name not in self.positional_off:
                x = x + self.pos[name][:, : ids.shape[1]]
            for blk in self.encoders[name]:
                x = blk(x, key_mask=valid)
            feats.append(x)
            masks.append(valid)

        fused = []
        for i, name in enumerate(COMPONENTS):
            ctx = torch.cat([f for j, f in enumerate(feats) if j != i], dim=1)
            ctx_mask = torch.cat([m for j, m in enumerate(masks) if j != i], dim=1)
            x = feats[i]
            for blk in self.fusion[name]:
                x, _ = blk(x, ctx, self_mask=masks[i], context_mask=ctx_mask)
            fused.append(x)
        return self.norm(torch.cat(fused, dim=1)), torch.cat(masks, dim=1)


class Projection(nn.Linear):
    """Linear map (with bias) into the shared embedding dimension."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected input dim {self.in_features}, got {x.shape[-1]}")
        return super().forward(x)
