"""Small pre-norm transformer building blocks shared by every module."""

from __future__ import annotations

import math

import torch
from torch import nn


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``key_mask`` is a boolean ``B x Nk`` tensor, True for valid keys.
    Returns ``(weights @ v, weights)``.
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        mask = key_mask[:, None, :] if logits.dim() == 3 else key_mask[:, None, None, :]
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = logits.softmax(dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention with bias-free Q/K/V maps.

    ``forward`` returns the merged output and the attention map averaged
    over heads (``B x Nq x Nk``).
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(context))
        v = self._split(self.w_v(context))
        out, weights = attend(q, k, v, key_mask)
        b, h, n, dh = out.shape
        out = out.transpose(1, 2).reshape(b, n, h * dh)
        return self.out(out), weights.mean(dim=1)


class MLP(nn.Sequential):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x, key_mask=None):
        h, _ = self.attn(self.norm1(x), key_mask=key_mask)
        x = x + h
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Self-attention, cross-attention to a context sequence, then MLP.

    With ``cross_residual=False`` the cross-attention output replaces the
    query stream instead of being added to it, so everything after that point
    is a mixture of context values.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2, cross_residual: bool = True):
        super().__init__()
        self.cross_residual = cross_residual
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x, context, self_mask=None, context_mask=None):
        h, _ = self.self_attn(self.norm_self(x), key_mask=self_mask)
        x = x + h
        h, weights = self.cross_attn(self.norm_q(x), self.norm_ctx(context), key_mask=context_mask)
        x = x + h if self.cross_residual else h
        return x + self.mlp(self.norm_mlp(x)), weights


def zero_residual_branches(block: nn.Module) -> None:
    """Zero every residual branch output so the block computes the identity."""
    for m in block.modules():
        if isinstance(m, MultiHeadAttention):
            nn.init.zeros_(m.out.weight)
            nn.init.zeros_(m.out.bias)
        elif isinstance(m, MLP):
            nn.init.zeros_(m[-1].weight)
            nn.init.zeros_(m[-1].bias)


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)


def masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean over axis 1 restricted to positions where ``mask`` is True."""
    if mask is None:
        return x.mean(dim=1)
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


__all__ = [
    "attend", "MultiHeadAttention", "MLP", "EncoderBlock", "DecoderBlock",
    "zero_residual_branches", "init_weights", "masked_mean"
]
