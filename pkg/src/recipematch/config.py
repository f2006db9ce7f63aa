"""Flat run configuration with per-key provenance (default, file, flag)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .data import SequenceCaps, SyntheticSpec
from .distillation import DistillConfig
from .encoders import ImageEncoderConfig, RecipeEncoderConfig
from .matching import MatchingConfig


@dataclass(frozen=True)
class Config:
    # data
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    n_classes: int = 16
    noise_std: float = 0.05
    text_variation: bool = False
    vocab_size: int = 128
    title_cap: int = 16
    ingredients_cap: int = 64
    instructions_cap: int = 128
    n_train: int = 200
    n_val: int = 100
    n_test: int = 100
    data_seed: int = 0
    # encoders
    image_depth: int = 2
    image_heads: int = 2
    image_hidden: int = 64
    recipe_depth: int = 1
    recipe_heads: int = 2
    recipe_hidden: int = 64
    fusion_depth: int = 1
    fusion_heads: int = 2
    embed_dim: int = 64
    # masking
    mask_ratio: float = 0.75
    mask_recipe: bool = False
    # matching
    temperature_init: float = 0.07
    normalize_features: bool = True
    exclude_positive: bool = False
    raw_ratio_loss: bool = False
    include_cls_in_local: bool = True
    matching_depth: int = 4
    matching_heads: int = 4
    matching_cross_residual: bool = False
    # distillation
    beta: float = 1.0
    ema_momentum: float = 0.999
    recon_depth: int = 2
    recon_heads: int = 2
    # objective and schedule
    lambda_itm: float = 1.0
    lambda_dist: float = 1.0
    gc_weight: float = 1.0
    lc_weight: float = 1.0
    triplet_margin: float = 0.3
    triplet_mining: str = "adaptive"
    itc_on_masked: bool = False
    epochs: int = 50
    max_steps: int = 0
    freeze_image_encoder_epochs: int = 0
    lr_main: float = 1e-3
    lr_image_encoder: float = 1e-3
    batch_size: int = 32
    grad_clip: float = 1.0
    seed: int = 0
    # evaluation
    eval_bag_size: int = 100
    eval_n_bags: int = 10

    def __post_init__(self):
        for name in ("lambda_itm", "lambda_dist", "gc_weight", "lc_weight", "triplet_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.freeze_image_encoder_epochs > self.epochs:
            raise ValueError("freeze_image_encoder_epochs exceeds epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.triplet_mining not in ("adaptive", "hard"):
            raise ValueError("triplet_mining must be 'adaptive' or 'hard'")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def image_encoder(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(
            self.image_size, self.patch_size, self.channels,
            self.image_depth, self.image_heads, self.image_hidden,
        )

    def recipe_encoder(self) -> RecipeEncoderConfig:
        return RecipeEncoderConfig(
            vocab_size=self.vocab_size,
            component_depth=self.recipe_depth,
            component_heads=self.recipe_heads,
            component_hidden=self.recipe_hidden,
            fusion_depth=self.fusion_depth,
            fusion_heads=self.fusion_heads,
            max_len=(self.title_cap, self.ingredients_cap, self.instructions_cap),
        )

    def matching(self) -> MatchingConfig:
        return MatchingConfig(
            temperature_init=self.temperature_init,
            normalize_features=self.normalize_features,
            exclude_positive=self.exclude_positive,
            raw_ratio_loss=self.raw_ratio_loss,
            include_cls_in_local=self.include_cls_in_local,
            matching_depth=self.matching_depth,
            matching_heads=self.matching_heads,
            cross_residual=self.matching_cross_residual,
        )

    def distill(self) -> DistillConfig:
        return DistillConfig(self.beta, self.ema_momentum, self.recon_depth, self.recon_heads)

    def caps(self) -> SequenceCaps:
        return SequenceCaps(self.title_cap, self.ingredients_cap, self.instructions_cap)

    def synthetic(self, seed: int | None = None, noise_std: float | None = None) -> SyntheticSpec:
        grid = self.image_size // self.patch_size
        return SyntheticSpec(
            vocab_size=self.vocab_size,
            n_ingredient_classes=self.n_classes,
            grid=(grid, grid),
            patch_size=self.patch_size,
            channels=self.channels,
            noise_std=self.noise_std if noise_std is None else noise_std,
            seed=self.data_seed if seed is None else seed,
            text_variation=self.text_variation,
        )


KEYS = {f.name: f for f in fields(Config)}


def coerce(key: str, raw: Any) -> Any:
    """Convert ``raw`` (string or YAML scalar) to the declared type of ``key``."""
    if key not in KEYS:
        raise KeyError(key)
    kind = KEYS[key].type
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "str":
        return str(raw)
    if kind == "int":
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
        return int(raw)
    return float(raw)


class UnknownKeyError(KeyError):
    pass


@dataclass
class RunConfig:
    config: Config
    provenance: dict[str, str]

    @classmethod
    def resolve(
        cls,
        file_values: dict[str, Any] | None = None,
        flag_values: dict[str, Any] | None = None,
    ) -> "RunConfig":
        values: dict[str, Any] = {}
        prov = {k: "default" for k in KEYS}
        for source, given in (("file", file_values or {}), ("flag", flag_values or {})):
            for key, raw in given.items():
                if key not in KEYS:
                    raise UnknownKeyError(f"unknown config key {key!r}")
                values[key] = coerce(key, raw)
                prov[key] = source
        # an explicit seed also drives data generation unless that has its own
        if prov["seed"] != "default" and prov["data_seed"] == "default":
            values["data_seed"] = values["seed"]
            prov["data_seed"] = prov["seed"]
        return cls(Config(**values), prov)

    def resolved_text(self) -> str:
        lines = [
            f"{k}: {yaml.safe_dump(getattr(self.config, k), default_flow_style=True).strip().removesuffix('...').strip()}"
            f"  # {self.provenance[k]}"
            for k in KEYS
        ]
        return "\n".join(lines) + "\n"


def read_config_file(path: str | Path) -> dict[str, Any]:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a flat key-value document")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ValueError(f"{path}: key {key!r} must map to a scalar")
        if key not in KEYS:
            raise UnknownKeyError(f"unknown config key {key!r} in {path}")
    return data
