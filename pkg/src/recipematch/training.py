"""Combined objective, triplet loss and the optimization loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .config import Config
from .data import Pair, Tokenizer, make_batches
from .distillation import ema_update, loss_dist
from .masking import sample_mask, sample_token_mask
from .matching import global_features, local_recipe_features, loss_gc, loss_lc
from .model import ForwardOutputs, RecipeImageModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "recipematch-checkpoint/1"
ATTN_TOL = 1e-5
TERM_NAMES = ("L_itc", "L_GC", "L_LC", "L_dist")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: dict):
        super().__init__(message)
        self.checkpoint = checkpoint


class InvariantViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# losses


def loss_itc(image_global, recipe_global, margin: float = 0.3, mining: str = "adaptive") -> torch.Tensor:
    """Bidirectional triplet margin loss on cosine similarity.

    ``mining="hard"`` keeps only the hardest negative per anchor.
    ``mining="adaptive"`` averages the hinge over every violating triplet
    (zero when none violate), which does not collapse from random init.
    """
    b = image_global.shape[0]
    if b < 2:
        raise ValueError("triplet loss needs a batch of at least 2")
    sim = F.normalize(image_global, dim=-1) @ F.normalize(recipe_global, dim=-1).T
    pos = sim.diagonal()
    eye = torch.eye(b, dtype=torch.bool, device=sim.device)
    if mining == "hard":
        off = sim.masked_fill(eye, float("-inf"))
        i2r = F.relu(margin - pos + off.max(dim=1).values)
        r2i = F.relu(margin - pos + off.max(dim=0).values)
        return (i2r.mean() + r2i.mean()) / 2
    if mining != "adaptive":
        raise ValueError(f"unknown triplet mining {mining!r}")
    i2r = F.relu(margin - pos[:, None] + sim).masked_fill(eye, 0.0)
    r2i = F.relu(margin - pos[None, :] + sim).masked_fill(eye, 0.0)
    return (
        i2r.sum() / (i2r > 0).sum().clamp_min(1) + r2i.sum() / (r2i > 0).sum().clamp_min(1)
    ) / 2


@dataclass
class LossBundle:
    """Named loss terms; a term left as ``None`` was not computed (zero weight)."""

    itc: torch.Tensor
    gc: torch.Tensor | None = None
    lc: torch.Tensor | None = None
    dist: torch.Tensor | None = None

    def items(self):
        terms = {"L_itc": self.itc, "L_GC": self.gc, "L_LC": self.lc, "L_dist": self.dist}
        return {k: v for k, v in terms.items() if v is not None}.items()


def total_loss(
    losses: LossBundle,
    lambda_itm: float = 1.0,
    lambda_dist: float = 1.0,
    gc_weight: float = 1.0,
    lc_weight: float = 1.0,
) -> torch.Tensor:
    """``L_itc + lambda_itm (L_GC + L_LC) + lambda_dist L_dist``.

    ``gc_weight``/``lc_weight`` switch the two matching terms for ablations.
    """
    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(name, float(value))
    total = losses.itc
    if losses.gc is not None:
        total = total + lambda_itm * gc_weight * losses.gc
    if losses.lc is not None:
        total = total + lambda_itm * lc_weight * losses.lc
    if losses.dist is not None:
        total = total + lambda_dist * losses.dist
    return total


def objective(losses: LossBundle, cfg: Config) -> torch.Tensor:
    return total_loss(losses, cfg.lambda_itm, cfg.lambda_dist, cfg.gc_weight, cfg.lc_weight)


def active_terms(cfg: Config) -> tuple[bool, bool, bool]:
    """Which of (L_GC, L_LC, L_dist) carry nonzero weight."""
    return (
        cfg.lambda_itm * cfg.gc_weight > 0,
        cfg.lambda_itm * cfg.lc_weight > 0,
        cfg.lambda_dist > 0,
    )


def check_attention(out: ForwardOutputs, tol: float = ATTN_TOL) -> None:
    """Rows of both cross-attention maps must be probability vectors."""
    if out.match is None:
        return
    for name, attn in (("A_I", out.match.a_i), ("A_R", out.match.a_r)):
        attn = attn.detach()
        if not torch.isfinite(attn).all() or (attn < 0).any():
            raise InvariantViolation(f"{name} has negative or non-finite entries")
        err = float((attn.sum(dim=-1) - 1).abs().max())
        if err > tol:
            raise InvariantViolation(f"{name} rows deviate from 1 by {err:.2e}")


def compute_losses(
    model: RecipeImageModel,
    out: ForwardOutputs,
    mask,
    cfg: Config,
    terms: tuple[bool, bool, bool] = (True, True, True),
) -> LossBundle:
    use_gc, use_lc, use_dist = terms
    bundle = LossBundle(itc=loss_itc(out.image_global, out.recipe_global, cfg.triplet_margin, cfg.triplet_mining))
    if out.match is not None and (use_gc or use_lc):
        tau = model.matcher.temperature
        mcfg = model.matcher.cfg
        if use_gc:
            i_g, r_g = global_features(out.match)
            bundle.gc = loss_gc(i_g, r_g, tau, mcfg)
        if use_lc:
            r_l = local_recipe_features(out.match.a_i, out.match.r_att, out.recipe_mask)
            bundle.lc = loss_lc(out.match.i_att, r_l, tau, mcfg)
    if use_dist and out.predicted is not None:
        dist = out.i_f.sum() * 0.0
        if mask.n_masked:
            dist = dist + loss_dist(out.predicted, out.target, mask, cfg.beta)
        if out.recipe_token_mask is not None and bool(out.recipe_token_mask.any()):
            dist = dist + loss_dist(out.recipe_predicted, out.recipe_target, out.recipe_token_mask, cfg.beta)
        bundle.dist = dist
    return bundle


def step_losses(model, batch, cfg: Config, generator: torch.Generator, check: bool = True, skip_inactive: bool = True):
    """One forward pass with freshly sampled masks; returns (bundle, total, outputs).

    With ``skip_inactive`` the matching and reconstruction branches are not
    evaluated when every loss they feed has zero weight.
    """
    b = len(batch)
    mask = sample_mask(model.n_patches, cfg.mask_ratio, b, generator=generator)
    token_mask = None
    if cfg.mask_recipe:
        token_mask = sample_token_mask(batch.recipes.mask, cfg.mask_ratio, generator)
    terms = active_terms(cfg) if skip_inactive else (True, True, True)
    out = model(
        batch.images, batch.recipes, mask, token_mask,
        with_matching=terms[0] or terms[1], with_reconstruction=terms[2],
    )
    if check:
        check_attention(out)
    bundle = compute_losses(model, out, mask, cfg, terms)
    return bundle, objective(bundle, cfg), out


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(model: RecipeImageModel, cfg: Config, tokenizer: Tokenizer | None = None, **extra) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "vocab": tokenizer.to_json() if tokenizer else None,
        **extra,
    }


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(source: str | Path | dict) -> tuple[RecipeImageModel, Tokenizer | None, dict]:
    ckpt = source if isinstance(source, dict) else torch.load(source, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {ckpt.get('format')!r}")
    cfg = Config(**ckpt["config"])
    model = RecipeImageModel(cfg)
    dtype = next(iter(ckpt["state"].values())).dtype
    model.to(dtype)
    model.load_state_dict(ckpt["state"])
    model.eval()
    tok = Tokenizer(ckpt["vocab"]) if ckpt.get("vocab") else None
    return model, tok, ckpt


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: RecipeImageModel
    checkpoint: dict  # final weights
    best_checkpoint: dict | None
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    steps: int = 0


def _build_optimizer(model: RecipeImageModel, cfg: Config, with_image_encoder: bool):
    main = [p for _, p in model.trainable_parameters(include_image_encoder=False)]
    opt = torch.optim.Adam([{"params": main, "lr": cfg.lr_main, "name": "main"}])
    if with_image_encoder:
        _add_image_group(opt, model, cfg)
    return opt


def _add_image_group(opt, model, cfg):
    opt.add_param_group({"params": list(model.student.parameters()), "lr": cfg.lr_image_encoder, "name": "image_encoder"})


def train(
    pairs: Sequence[Pair],
    cfg: Config,
    val_pairs: Sequence[Pair] | None = None,
    tokenizer: Tokenizer | None = None,
    run_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train on ``pairs``; validate every epoch on ``val_pairs`` if given.

    Step order: student and teacher forward, matching, reconstruction, one
    backward over the combined objective, clipped optimizer step, temperature
    clamp, EMA teacher update. The image encoder joins the optimizer only
    after ``freeze_image_encoder_epochs`` epochs.
    """
    from .evaluation import validate  # evaluation imports training for checkpoints

    if not pairs:
        raise ValueError("empty training set")
    if len(pairs) < cfg.batch_size:
        raise ValueError(f"{len(pairs)} pairs cannot fill one batch of {cfg.batch_size}")

    torch.manual_seed(cfg.seed)
    model = RecipeImageModel(cfg).to(dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    frozen = cfg.freeze_image_encoder_epochs > 0
    opt = _build_optimizer(model, cfg, with_image_encoder=not frozen)

    out_dir = Path(run_dir) if run_dir else None
    metrics_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_dir / "metrics.jsonl").open("a")

    result = TrainResult(model, make_checkpoint(model, cfg, tokenizer, step=0), None)
    best_r1 = -math.inf
    step = 0
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            if frozen and epoch >= cfg.freeze_image_encoder_epochs:
                _add_image_group(opt, model, cfg)
                frozen = False
            model.train()
            for batch in make_batches(pairs, cfg.batch_size, cfg.seed, True, epoch, cfg.caps(), dtype):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                model.zero_grad(set_to_none=True)
                try:
                    bundle, loss, _ = step_losses(model, batch, cfg, gen)
                except NonFiniteLoss as exc:
                    raise TrainingDiverged(
                        f"step {step}: {exc}", _last_good(model, cfg, tokenizer, result, step)
                    ) from exc
                loss.backward()
                params = [p for g in opt.param_groups for p in g["params"]]
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                model.matcher.clamp_temperature_()
                for student, teacher in model.teachers():
                    ema_update(student, teacher, cfg.ema_momentum)
                step += 1
                rec = {
                    "step": step, "epoch": epoch, "L": loss.item(),
                    **dict.fromkeys(TERM_NAMES),
                    **{k: v.item() for k, v in bundle.items()},
                    "lr": opt.param_groups[0]["lr"],
                }
                result.history.append(rec)
                if metrics_file:
                    metrics_file.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)

            if val_pairs:
                report = validate(model, val_pairs, cfg)
                entry = {"epoch": epoch, "step": step, **report.summary()}
                result.validation.append(entry)
                if metrics_file:
                    metrics_file.write(json.dumps({"validation": entry}) + "\n")
                if report.r1 > best_r1:
                    best_r1 = report.r1
                    result.best_checkpoint = make_checkpoint(model, cfg, tokenizer, step=step, epoch=epoch)
    finally:
        if metrics_file:
            metrics_file.close()

    model.eval()
    result.steps = step
    result.checkpoint = make_checkpoint(model, cfg, tokenizer, step=step)
    if out_dir:
        save_checkpoint(result.checkpoint, out_dir / "checkpoint.pt")
        if result.best_checkpoint:
            save_checkpoint(result.best_checkpoint, out_dir / "best.pt")
    return result


def _last_good(model, cfg, tokenizer, result: TrainResult, step: int) -> dict:
    if all(torch.isfinite(p).all() for p in model.parameters()):
        return make_checkpoint(model, cfg, tokenizer, step=step)
    return copy.deepcopy(result.best_checkpoint or result.checkpoint)
