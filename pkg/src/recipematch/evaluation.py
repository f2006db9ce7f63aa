"""Retrieval metrics under the bagged protocol, ablation harness, attention localization."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import Config
from .data import Pair, Tokenizer, collate, ingredient_name
from .masking import MaskSpec
from .training import InvariantViolation, train

log = logging.getLogger(__name__)

DIRECTIONS = ("image2recipe", "recipe2image")
KS = (1, 5, 10)

# Full-scale reference values (image-to-recipe, 10k bags); kept for reports only.
REFERENCE_LOSS_ABLATION_R1 = {
    "Baseline": 38.3,
    "+L_LC": 41.7,
    "+L_LC+L_GC": 43.8,
    "+L_LC+L_GC+L_dist": 44.2,
    "masking both modalities": 43.9,
}
REFERENCE_MASK_RATIO_R1 = {0.90: 43.8, 0.75: 44.2, 0.50: 41.7, 0.25: 39.8}

LOSS_ABLATION_VARIANTS: dict[str, dict] = {
    "Baseline": {"lambda_itm": 0.0, "lambda_dist": 0.0, "mask_ratio": 0.0},
    "+L_LC": {"gc_weight": 0.0, "lambda_dist": 0.0, "mask_ratio": 0.0},
    "+L_LC+L_GC": {"lambda_dist": 0.0, "mask_ratio": 0.0},
    "+L_LC+L_GC+L_dist": {},
    "masking both modalities": {"mask_recipe": True},
}
MASK_RATIO_VARIANTS: dict[str, dict] = {f"ratio {r:.2f}": {"mask_ratio": r} for r in (0.90, 0.75, 0.50, 0.25)}


# ---------------------------------------------------------------------------
# ranking


def true_pair_ranks(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; ties count against it."""
    sim = np.asarray(sim)
    pos = np.diag(sim)[:, None]
    return (sim >= pos).sum(axis=1)


def rank_metrics(sim: np.ndarray) -> dict[str, float]:
    ranks = true_pair_ranks(sim)
    out = {"medR": float(np.median(ranks))}
    for k in KS:
        out[f"r{k}"] = 100.0 * float(np.mean(ranks <= k))
    return out


@dataclass
class RetrievalReport:
    direction: str
    bag_size: int
    n_bags: int
    per_bag: list[dict[str, float]]
    medR: float = 0.0
    r1: float = 0.0
    r5: float = 0.0
    r10: float = 0.0

    def __post_init__(self):
        if self.per_bag:
            for key in ("medR", "r1", "r5", "r10"):
                setattr(self, key, float(np.mean([b[key] for b in self.per_bag])))
        self.check()

    def check(self) -> None:
        for b in [*self.per_bag, self.summary()]:
            if not (0 <= b["r1"] <= b["r5"] <= b["r10"] <= 100):
                raise InvariantViolation(f"recall not monotone in [0, 100]: {b}")
            if b["medR"] < 1:
                raise InvariantViolation(f"median rank below 1: {b}")

    def summary(self) -> dict[str, float]:
        return {"medR": self.medR, "r1": self.r1, "r5": self.r5, "r10": self.r10}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        head = f"{self.direction}  bag_size={self.bag_size} n_bags={self.n_bags}"
        return (
            f"{head}\n{'medR':>7} {'R@1':>7} {'R@5':>7} {'R@10':>7}\n"
            f"{self.medR:7.1f} {self.r1:7.1f} {self.r5:7.1f} {self.r10:7.1f}"
        )


def rank_and_score(
    image_emb: np.ndarray,
    recipe_emb: np.ndarray,
    direction: str = "image2recipe",
    bag_size: int = 100,
    n_bags: int = 10,
    seed: int = 0,
) -> RetrievalReport:
    """Cosine-similarity retrieval metrics averaged over random bags."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    n = len(image_emb)
    if len(recipe_emb) != n:
        raise ValueError("image and recipe embeddings must pair up row by row")
    if bag_size < 2:
        raise ValueError("bag_size must be >= 2")
    if bag_size > n:
        raise ValueError(f"bag_size {bag_size} exceeds corpus size {n}")
    img = _unit(np.asarray(image_emb, dtype=np.float64))
    rec = _unit(np.asarray(recipe_emb, dtype=np.float64))
    rng = np.random.default_rng(seed)
    per_bag = []
    for _ in range(n_bags):
        idx = rng.choice(n, size=bag_size, replace=False)
        sim = img[idx] @ rec[idx].T
        per_bag.append(rank_metrics(sim if direction == "image2recipe" else sim.T))
    return RetrievalReport(direction, bag_size, n_bags, per_bag)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# embedding


@torch.no_grad()
def embed_corpus(model, pairs: Sequence[Pair], cfg: Config | None = None, batch_size: int = 128):
    """Unit-norm global embeddings from the encoders alone (no masking, no heads)."""
    cfg = cfg or model.cfg
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    imgs, recs = [], []
    for start in range(0, len(pairs), batch_size):
        batch = collate(pairs[start : start + batch_size], cfg.caps(), dtype)
        imgs.append(model.image_embedding(batch.images))
        recs.append(model.recipe_embedding(batch.recipes))
    model.train(was_training)
    return torch.cat(imgs).double().numpy(), torch.cat(recs).double().numpy()


def validate(model, pairs: Sequence[Pair], cfg: Config) -> RetrievalReport:
    img, rec = embed_corpus(model, pairs, cfg)
    return rank_and_score(img, rec, "image2recipe", min(cfg.eval_bag_size, len(pairs)), 1, cfg.seed)


def evaluate(model, pairs: Sequence[Pair], cfg: Config, seed: int = 0) -> dict[str, RetrievalReport]:
    img, rec = embed_corpus(model, pairs, cfg)
    bag = min(cfg.eval_bag_size, len(pairs))
    return {d: rank_and_score(img, rec, d, bag, cfg.eval_n_bags, seed) for d in DIRECTIONS}


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    name: str
    delta: dict
    seeds: list[int]
    r1: list[float] = field(default_factory=list)
    medR: list[float] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)
    error: str | None = None
    reference_r1: float | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.r1)) if self.r1 else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.r1, ddof=1)) if len(self.r1) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def __getitem__(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def text(self) -> str:
        lines = [f"{'variant':<26} {'R@1 mean':>9} {'std':>6} {'medR':>6}  per-seed R@1   (full-scale ref)"]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.name:<26} failed: {r.error}")
                continue
            ref = f"({r.reference_r1})" if r.reference_r1 is not None else ""
            seeds = " ".join(f"{v:5.1f}" for v in r.r1)
            lines.append(f"{r.name:<26} {r.mean:9.2f} {r.std:6.2f} {np.mean(r.medR):6.1f}  {seeds}  {ref}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"rows": [{**asdict(r), "mean_r1": r.mean, "std_r1": r.std} for r in self.rows]}


def _run_key(cfg: Config) -> tuple:
    return tuple(sorted(asdict(cfg).items()))


def run_ablation(
    train_pairs: Sequence[Pair],
    test_pairs: Sequence[Pair],
    base: Config,
    variants: Mapping[str, dict],
    seeds: Sequence[int] = (0,),
    val_pairs: Sequence[Pair] | None = None,
    references: Mapping[str, float] | None = None,
    cache: dict | None = None,
) -> AblationTable:
    """Train every variant (a config delta over ``base``) per seed and score R@1 on ``test_pairs``.

    A failing variant is recorded with its error and the remaining rows still
    run. ``cache`` maps resolved configs to reports so identical runs are shared
    across calls.
    """
    cache = {} if cache is None else cache
    rows = []
    for name, delta in variants.items():
        row = AblationRow(name, dict(delta), list(seeds), reference_r1=(references or {}).get(name))
        try:
            for seed in seeds:
                cfg = base.replace(**delta, seed=seed)
                key = _run_key(cfg)
                if key not in cache:
                    res = train(train_pairs, cfg, val_pairs=val_pairs)
                    cache[key] = evaluate(res.model, test_pairs, cfg, seed=seed)["image2recipe"]
                rep = cache[key]
                row.r1.append(rep.r1)
                row.medR.append(rep.medR)
                row.reports.append(rep.to_dict())
        except Exception as exc:  # noqa: BLE001 - one failed row must not stop the table
            log.exception("variant %s failed", name)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return AblationTable(rows)


# ---------------------------------------------------------------------------
# attention localization


@dataclass
class LocalizationResult:
    score: float
    chance: float
    null_mean: float
    null_std: float
    null_p95: float
    p_value: float
    per_patch: np.ndarray

    @property
    def above_null(self) -> bool:
        return self.score > self.null_p95


def localization_from_attention(
    attn: Sequence[np.ndarray],
    tokens: Sequence[np.ndarray],
    groundtruth: Sequence[Mapping[int, int]],
    class_tokens: Mapping[int, int],
    n_perm: int = 200,
    seed: int = 0,
) -> LocalizationResult:
    """Score attention mass that painted patches put on their own ingredient tokens.

    ``attn[i]`` is ``(1+P) x S`` for sample ``i`` (row 0 is CLS); ``tokens[i]``
    holds the ``S`` token ids with padding already removed from both.
    The null distribution shuffles ingredient labels among each sample's
    painted patches.
    """
    mats, chance = [], []
    for a, tok, gt in zip(attn, tokens, groundtruth):
        patches = sorted(gt)
        classes = [gt[p] for p in patches]
        hits = np.stack([tok == class_tokens[c] for c in classes], axis=1).astype(np.float64)
        mats.append(a[[p + 1 for p in patches]] @ hits)  # patch x class mass
        chance.extend(hits.sum(axis=0) / len(tok))
    if not mats:
        raise ValueError("no painted patches to score")
    per_patch = np.concatenate([np.diag(m) for m in mats])
    score = float(per_patch.mean())
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for j in range(n_perm):
        vals = [m[np.arange(len(m)), rng.permutation(len(m))] for m in mats]
        null[j] = np.concatenate(vals).mean()
    return LocalizationResult(
        score=score,
        chance=float(np.mean(chance)),
        null_mean=float(null.mean()),
        null_std=float(null.std(ddof=1)) if n_perm > 1 else 0.0,
        null_p95=float(np.quantile(null, 0.95)),
        p_value=float((1 + np.sum(null >= score)) / (1 + n_perm)),
        per_patch=per_patch,
    )


@torch.no_grad()
def attention_localization(
    model,
    pairs: Sequence[Pair],
    tokenizer: Tokenizer,
    n_perm: int = 200,
    seed: int = 0,
    batch_size: int = 64,
) -> LocalizationResult:
    """Localization of the image-side cross-attention on synthetic pairs with known layout."""
    if any(p.groundtruth is None for p in pairs):
        raise ValueError("attention localization needs synthetic pairs with a ground-truth map")
    classes = {c for p in pairs for c in p.groundtruth.values()}
    class_tokens = {c: tokenizer.index[ingredient_name(c)] for c in classes}
    model.eval()
    dtype = next(model.parameters()).dtype
    attn, tokens, gts = [], [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        batch = collate(chunk, model.cfg.caps(), dtype)
        out = model(batch.images, batch.recipes, MaskSpec.empty(len(chunk), model.n_patches))
        valid = batch.recipes.mask
        ids = batch.recipes.tokens
        for i in range(len(chunk)):
            v = valid[i]
            attn.append(out.match.a_i[i][:, v].double().numpy())
            tokens.append(ids[i][v].numpy())
            gts.append(chunk[i].groundtruth)
    return localization_from_attention(attn, tokens, gts, class_tokens, n_perm, seed)


def paired_difference_test(a: np.ndarray, b: np.ndarray, n_perm: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Mean of ``a - b`` and its two-sided sign-flip permutation p-value."""
    diff = np.asarray(a) - np.asarray(b)
    observed = float(diff.mean())
    rng = np.random.default_rng(seed)
    flips = rng.choice([-1.0, 1.0], size=(n_perm, len(diff)))
    null = np.abs((flips * diff).mean(axis=1))
    return observed, float((1 + np.sum(null >= abs(observed))) / (1 + n_perm))
