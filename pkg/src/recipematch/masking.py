"""Patch masking and re-assembly of the full-length student sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class MaskSpec:
    """Masked patch positions per sample.

    ``indices`` is a ``B x |M|`` long tensor of sorted sequence positions in
    ``1..n_patches``; position 0 is the CLS token and is never masked.
    """

    indices: torch.Tensor
    n_patches: int
    ratio: float = 0.0

    def __post_init__(self):
        if self.indices.dim() != 2:
            raise ValueError("mask indices must be B x |M|")
        if self.indices.numel():
            if int(self.indices.min()) < 1:
                raise ValueError("mask includes the CLS position")
            if int(self.indices.max()) > self.n_patches:
                raise ValueError(f"mask index beyond {self.n_patches} patches")

    @property
    def batch_size(self) -> int:
        return self.indices.shape[0]

    @property
    def n_masked(self) -> int:
        return self.indices.shape[1]

    @classmethod
    def empty(cls, batch_size: int, n_patches: int) -> "MaskSpec":
        return cls(torch.zeros(batch_size, 0, dtype=torch.long), n_patches, 0.0)

    def boolean(self) -> torch.Tensor:
        """``B x (1+P)`` tensor, True at masked positions."""
        out = torch.zeros(self.batch_size, self.n_patches + 1, dtype=torch.bool)
        out.scatter_(1, self.indices, True)
        return out

    def visible_indices(self) -> torch.Tensor:
        """``B x (1+P-|M|)`` sorted positions kept by the student, CLS first."""
        keep = ~self.boolean()
        order = torch.arange(self.n_patches + 1).expand(self.batch_size, -1)
        return order[keep].view(self.batch_size, -1)


def n_masked(n_patches: int, ratio: float) -> int:
    return math.floor(ratio * n_patches)


def sample_mask(
    n_patches: int,
    ratio: float,
    batch_size: int,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> MaskSpec:
    """Independent uniform-without-replacement masks, ``floor(ratio * P)`` per sample."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    k = n_masked(n_patches, ratio)
    if k == 0:
        return MaskSpec.empty(batch_size, n_patches)
    scores = torch.rand(batch_size, n_patches, generator=generator)
    idx = scores.argsort(dim=1)[:, :k].sort(dim=1).values + 1
    return MaskSpec(idx, n_patches, ratio)


def assemble_masked_sequence(
    visible: torch.Tensor,
    mask: MaskSpec,
    mask_token: torch.Tensor,
    positional: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scatter visible features back to full length and fill masked slots.

    Masked slots receive ``mask_token`` plus that position's row of
    ``positional`` (shape ``(1+P) x D``); visible rows are copied unchanged.
    """
    b, n_vis, d = visible.shape
    full = mask.n_patches + 1
    if n_vis != full - mask.n_masked or b != mask.batch_size:
        raise ValueError(
            f"visible sequence has shape {tuple(visible.shape)}, expected "
            f"({mask.batch_size}, {full - mask.n_masked}, D)"
        )
    if mask.n_masked == 0:
        return visible
    fill = mask_token.to(visible.dtype).expand(b, full, d)
    if positional is not None:
        fill = fill + positional.to(visible.dtype).unsqueeze(0)
    vis_idx = mask.visible_indices().unsqueeze(-1).expand(-1, -1, d)
    return fill.scatter(1, vis_idx, visible)


def extract_visible(sequence: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
    idx = mask.visible_indices().unsqueeze(-1).expand(-1, -1, sequence.shape[-1])
    return sequence.gather(1, idx)


def sample_token_mask(
    valid: torch.Tensor, ratio: float, generator: torch.Generator
) -> torch.Tensor:
    """Boolean mask over valid recipe tokens, ``floor(ratio * n_valid)`` per row."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    scores = torch.rand(valid.shape, generator=generator).masked_fill(~valid, 2.0)
    rank = scores.argsort(dim=1).argsort(dim=1)
    counts = (valid.sum(dim=1).double() * ratio).floor().long()
    return rank < counts.unsqueeze(1)
