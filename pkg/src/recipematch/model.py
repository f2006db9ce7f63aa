"""The full network: student/teacher image encoders, recipe encoder, matching and reconstruction heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import Config
from .data import MASK_ID, RecipeBatch
from .distillation import ReconstructionHead
from .encoders import ImageEncoder, Projection, RecipeEncoder
from .layers import masked_mean
from .masking import MaskSpec, assemble_masked_sequence
from .matching import MatchingHead, MatchOutputs


def _frozen_copy(module: nn.Module) -> nn.Module:
    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


@dataclass
class ForwardOutputs:
    i_f: torch.Tensor  # mask-filled projected student sequence, B x (1+P) x D
    r_f: torch.Tensor  # projected recipe tokens, B x S x D
    recipe_mask: torch.Tensor  # B x S, True for real tokens
    image_global: torch.Tensor  # projected student CLS used by the triplet loss
    recipe_global: torch.Tensor  # projected pooled recipe feature
    match: MatchOutputs | None = None
    predicted: torch.Tensor | None = None  # reconstruction of i_f, B x (1+P) x D
    target: torch.Tensor | None = None  # projected teacher features, B x (1+P) x D
    recipe_token_mask: torch.Tensor | None = None
    recipe_predicted: torch.Tensor | None = None
    recipe_target: torch.Tensor | None = None


class RecipeImageModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.student = ImageEncoder(cfg.image_encoder())
        self.teacher = _frozen_copy(self.student)
        self.recipe_encoder = RecipeEncoder(cfg.recipe_encoder())
        self.image_proj = Projection(cfg.image_hidden, d)
        self.recipe_proj = Projection(cfg.recipe_hidden, d)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.mask_pos = nn.Parameter(torch.randn(cfg.n_patches + 1, d) * 0.02)
        self.matcher = MatchingHead(d, cfg.matching())
        self.reconstructor = ReconstructionHead(d, cfg.recon_depth, cfg.recon_heads)
        if cfg.mask_recipe:
            self.recipe_teacher = _frozen_copy(self.recipe_encoder)
            self.recipe_reconstructor = ReconstructionHead(d, cfg.recon_depth, cfg.recon_heads)

    @property
    def n_patches(self) -> int:
        return self.student.n_patches

    def teachers(self) -> list[tuple[nn.Module, nn.Module]]:
        """(student, teacher) module pairs kept in sync by EMA."""
        pairs = [(self.student, self.teacher)]
        if self.cfg.mask_recipe:
            pairs.append((self.recipe_encoder, self.recipe_teacher))
        return pairs

    def trainable_parameters(self, include_image_encoder: bool = True):
        frozen = {id(p) for m in (self.teacher, getattr(self, "recipe_teacher", None)) if m for p in m.parameters()}
        student = {id(p) for p in self.student.parameters()}
        for name, p in self.named_parameters():
            if id(p) in frozen or (not include_image_encoder and id(p) in student):
                continue
            yield name, p

    # encoders -------------------------------------------------------------

    def encode_image_student(self, images, mask: MaskSpec | None = None):
        return self.student(images, mask)

    @torch.no_grad()
    def encode_image_teacher(self, images):
        return self.teacher(images)

    def encode_recipe(self, recipes: RecipeBatch):
        return self.recipe_encoder(recipes)

    def project(self, features, which: str):
        if which == "image":
            return self.image_proj(features)
        if which == "recipe":
            return self.recipe_proj(features)
        raise ValueError(f"unknown modality {which!r}")

    # retrieval embeddings -------------------------------------------------

    def image_embedding(self, images):
        return F.normalize(self.image_proj(self.student(images)[:, 0]), dim=-1)

    def recipe_embedding(self, recipes: RecipeBatch):
        feats, valid = self.recipe_encoder(recipes)
        return F.normalize(self.recipe_proj(masked_mean(feats, valid)), dim=-1)

    # training forward -----------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,
        recipes: RecipeBatch,
        mask: MaskSpec,
        recipe_token_mask: torch.Tensor | None = None,
        with_matching: bool = True,
        with_reconstruction: bool = True,
    ) -> ForwardOutputs:
        visible = self.project(self.encode_image_student(images, mask), "image")
        i_f = assemble_masked_sequence(visible, mask, self.mask_token, self.mask_pos)

        r_tokens, recipe_mask = self.encode_recipe(self._mask_recipe(recipes, recipe_token_mask))
        r_f = self.project(r_tokens, "recipe")

        if self.cfg.itc_on_masked or mask.n_masked == 0:
            image_global = i_f[:, 0]
        else:
            image_global = self.image_proj(self.student(images)[:, 0])
        if recipe_token_mask is None:
            recipe_global = masked_mean(r_f, recipe_mask)
        else:
            full, full_mask = self.recipe_encoder(recipes)
            recipe_global = self.recipe_proj(masked_mean(full, full_mask))

        out = ForwardOutputs(i_f, r_f, recipe_mask, image_global, recipe_global)
        if with_matching:
            out.match = self.matcher(i_f, r_f, recipe_mask)
        if with_reconstruction:
            out.predicted = self.reconstructor(i_f)
            with torch.no_grad():
                out.target = self.image_proj(self.teacher(images))
            if recipe_token_mask is not None:
                out.recipe_token_mask = recipe_token_mask
                out.recipe_predicted = self.recipe_reconstructor(r_f)
                with torch.no_grad():
                    out.recipe_target = self.recipe_proj(self.recipe_teacher(recipes)[0])
        return out

    @staticmethod
    def _mask_recipe(recipes: RecipeBatch, token_mask: torch.Tensor | None) -> RecipeBatch:
        if token_mask is None:
            return recipes
        ids = recipes.tokens.masked_fill(token_mask, MASK_ID)
        lt, li = recipes.title.shape[1], recipes.ingredients.shape[1]
        return RecipeBatch(
            ids[:, :lt], recipes.title_mask,
            ids[:, lt : lt + li], recipes.ingredients_mask,
            ids[:, lt + li :], recipes.instructions_mask,
        )
