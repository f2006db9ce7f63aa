"""Masked self-distillation: reconstruction transformer, SmoothL1 target loss, EMA teacher."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .layers import EncoderBlock, init_weights, zero_residual_branches
from .masking import MaskSpec


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 1.0
    ema_momentum: float = 0.999
    recon_depth: int = 2
    recon_heads: int = 2

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")


class ReconstructionHead(nn.Module):
    """Transformer encoder over the mask-filled sequence plus a linear output head.

    There is no final norm, so zeroed residual branches and an identity head
    make the whole module the identity map.
    """

    def __init__(self, dim: int, depth: int = 2, heads: int = 2, out_dim: int | None = None):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(depth))
        self.head = nn.Linear(dim, out_dim or dim)
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.head(x)

    @torch.no_grad()
    def identity_init_(self) -> None:
        if self.head.in_features != self.head.out_features:
            raise ValueError("identity init needs a square output head")
        for blk in self.blocks:
            zero_residual_branches(blk)
        self.head.weight.copy_(torch.eye(self.head.in_features))
        self.head.bias.zero_()


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean elementwise Huber-style loss: ``0.5 d^2 / beta`` below ``beta``, ``|d| - beta/2`` above."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.smooth_l1_loss(a, b, beta=beta)


def loss_dist(
    predicted: torch.Tensor,
    target: torch.Tensor,
    mask: MaskSpec | torch.Tensor,
    beta: float = 1.0,
) -> torch.Tensor:
    """SmoothL1 between predicted and (detached) target rows at masked positions only.

    Each masked position contributes the element-mean SmoothL1 of its feature
    vector; positions are averaged over the batch. ``mask`` is either a
    ``MaskSpec`` or a boolean ``B x N`` tensor.
    """
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    chosen = mask.boolean() if isinstance(mask, MaskSpec) else mask
    if not bool(chosen.any()):
        warnings.warn("empty mask: distillation loss is zero", stacklevel=2)
        return predicted.sum() * 0.0
    if beta <= 0:
        raise ValueError("beta must be > 0")
    per_elem = F.smooth_l1_loss(predicted, target.detach(), beta=beta, reduction="none")
    per_pos = per_elem.mean(dim=-1)
    return per_pos[chosen].mean()


def _tensors(tree) -> dict[str, torch.Tensor]:
    if isinstance(tree, nn.Module):
        return dict(tree.named_parameters())
    if isinstance(tree, Mapping):
        return dict(tree)
    raise TypeError(f"cannot read parameters from {type(tree).__name__}")


@torch.no_grad()
def ema_update(student, teacher, momentum: float) -> None:
    """In place: ``teacher = momentum * teacher + (1 - momentum) * student``.

    Accepts modules or name->tensor mappings; both sides must have the same
    names and shapes.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    s, t = _tensors(student), _tensors(teacher)
    if s.keys() != t.keys():
        raise ValueError(f"parameter names differ: {sorted(s.keys() ^ t.keys())}")
    for name, tp in t.items():
        sp = s[name]
        if sp.shape != tp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(sp.shape)} vs {tuple(tp.shape)}")
        if momentum == 1.0:
            continue
        tp.mul_(momentum).add_(sp.detach(), alpha=1.0 - momentum)
