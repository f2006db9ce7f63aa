"""Two-level image/recipe matching: cross-attention, global and local contrastive losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import DecoderBlock, attend, init_weights, masked_mean

TAU_MIN, TAU_MAX = 0.01, 1.0


@dataclass(frozen=True)
class MatchingConfig:
    temperature_init: float = 0.07
    normalize_features: bool = True
    # True: denominator sums over k != i only. False: standard InfoNCE.
    exclude_positive: bool = False
    # True: loss is the raw ratio Z averaged, without the negative log.
    raw_ratio_loss: bool = False
    include_cls_in_local: bool = True
    matching_depth: int = 4
    matching_heads: int = 4
    batch_reduction: str = "mean"
    # False: attended features are built from context values only, I_att = A_I V.
    cross_residual: bool = False

    def __post_init__(self):
        if not TAU_MIN <= self.temperature_init <= TAU_MAX:
            raise ValueError(f"temperature_init outside [{TAU_MIN}, {TAU_MAX}]")
        if self.batch_reduction not in ("mean", "sum"):
            raise ValueError("batch_reduction must be 'mean' or 'sum'")


@dataclass
class MatchOutputs:
    i_att: torch.Tensor  # B x (1+P) x D
    r_att: torch.Tensor  # B x S x D
    a_i: torch.Tensor  # B x (1+P) x S
    a_r: torch.Tensor  # B x S x (1+P)
    recipe_mask: torch.Tensor | None = None


def cross_attend(x, context, w_q, w_k, w_v, context_mask=None):
    """Single-head cross-attention with explicit weight matrices.

    ``Q = x W_q^T``, ``K = context W_k^T``, ``V = context W_v^T``;
    returns ``(softmax(QK^T / sqrt(D)) V, attention)``.
    """
    if x.shape[-1] != w_q.shape[1] or context.shape[-1] != w_k.shape[1]:
        raise ValueError("feature dimension does not match projection weights")
    q, k, v = F.linear(x, w_q), F.linear(context, w_k), F.linear(context, w_v)
    return attend(q, k, v, context_mask)


class MatchingHead(nn.Module):
    """Image-query decoder over recipe context, then recipe-query decoder over its output."""

    def __init__(self, dim: int, cfg: MatchingConfig = MatchingConfig()):
        super().__init__()
        self.cfg = cfg
        self.image_decoder = nn.ModuleList(
            DecoderBlock(dim, cfg.matching_heads, cross_residual=cfg.cross_residual)
            for _ in range(cfg.matching_depth)
        )
        self.recipe_decoder = nn.ModuleList(
            DecoderBlock(dim, cfg.matching_heads, cross_residual=cfg.cross_residual)
            for _ in range(cfg.matching_depth)
        )
        self.image_norm = nn.LayerNorm(dim)
        self.recipe_norm = nn.LayerNorm(dim)
        self.apply(init_weights)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / cfg.temperature_init)))

    @property
    def temperature(self) -> torch.Tensor:
        scale = self.logit_scale.clamp(math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN))
        return torch.exp(-scale)

    @torch.no_grad()
    def clamp_temperature_(self) -> None:
        self.logit_scale.clamp_(math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN))

    def cross_attend_image(self, i_f, r_f, recipe_mask=None):
        if i_f.shape[-1] != r_f.shape[-1]:
            raise ValueError("image and recipe features must share a dimension")
        x, attn = i_f, None
        for blk in self.image_decoder:
            x, attn = blk(x, r_f, context_mask=recipe_mask)
        return self.image_norm(x), attn

    def cross_attend_recipe(self, r_f, i_att, recipe_mask=None):
        if i_att.shape[-1] != r_f.shape[-1]:
            raise ValueError("image and recipe features must share a dimension")
        y, attn = r_f, None
        for blk in self.recipe_decoder:
            y, attn = blk(y, i_att, self_mask=recipe_mask)
        return self.recipe_norm(y), attn

    def forward(self, i_f, r_f, recipe_mask=None) -> MatchOutputs:
        i_att, a_i = self.cross_attend_image(i_f, r_f, recipe_mask)
        r_att, a_r = self.cross_attend_recipe(r_f, i_att, recipe_mask)
        return MatchOutputs(i_att, r_att, a_i, a_r, recipe_mask)


def global_features(out: MatchOutputs) -> tuple[torch.Tensor, torch.Tensor]:
    """CLS row of the attended image sequence and the mean attended recipe token."""
    return out.i_att[:, 0, :], masked_mean(out.r_att, out.recipe_mask)


def contrastive_log_z(x, y, tau, normalize=True, include_positive=False):
    """Per-sample ``log Z(x_i, y_i)`` over the batch axis (second to last).

    ``Z = exp(x_i.y_i / tau) / sum_k exp(x_i.y_k / tau)`` where the sum skips
    ``k = i`` unless ``include_positive`` is set.
    """
    b = x.shape[-2]
    if b < 2:
        raise ValueError("contrastive ratio needs a batch of at least 2")
    if normalize:
        x, y = F.normalize(x, dim=-1), F.normalize(y, dim=-1)
    logits = x @ y.transpose(-2, -1) / tau
    pos = logits.diagonal(dim1=-2, dim2=-1)
    if not include_positive:
        eye = torch.eye(b, dtype=torch.bool, device=logits.device)
        logits = logits.masked_fill(eye, float("-inf"))
    return pos - torch.logsumexp(logits, dim=-1)


def _pair_loss(x, y, tau, cfg: MatchingConfig) -> torch.Tensor:
    """Symmetric per-sample loss for one set of matched rows."""
    include = not cfg.exclude_positive
    fwd = contrastive_log_z(x, y, tau, cfg.normalize_features, include)
    bwd = contrastive_log_z(y, x, tau, cfg.normalize_features, include)
    if cfg.raw_ratio_loss:
        return (fwd.exp() + bwd.exp()) / 2
    return -(fwd + bwd) / 2


def _reduce(per_sample: torch.Tensor, cfg: MatchingConfig) -> torch.Tensor:
    return per_sample.mean() if cfg.batch_reduction == "mean" else per_sample.sum()


def loss_gc(i_g, r_g, tau, cfg: MatchingConfig = MatchingConfig()) -> torch.Tensor:
    return _reduce(_pair_loss(i_g, r_g, tau, cfg), cfg)


def local_recipe_features(a_i, r_att, recipe_mask=None) -> torch.Tensor:
    """Patch-relevant recipe features: ``R_l[:, p] = (1/S) sum_s A_I[:, p, s] R_att[:, s]``.

    With a padding mask, ``S`` is each sample's count of valid tokens.
    """
    if a_i.shape[-1] != r_att.shape[1]:
        raise ValueError("attention width does not match recipe length")
    pooled = torch.einsum("bps,bsd->bpd", a_i, r_att)
    if recipe_mask is None:
        return pooled / r_att.shape[1]
    n = recipe_mask.sum(dim=1).to(pooled.dtype).clamp_min(1.0)
    return pooled / n[:, None, None]


def loss_lc(i_att, r_l, tau, cfg: MatchingConfig = MatchingConfig()) -> torch.Tensor:
    """Per-position contrast of image tokens against same-position local recipe features."""
    start = 0 if cfg.include_cls_in_local else 1
    # positions lead so that negatives are drawn from the same position only
    x = i_att[:, start:].transpose(0, 1)
    y = r_l[:, start:].transpose(0, 1)
    return _reduce(_pair_loss(x, y, tau, cfg).mean(dim=0), cfg)
