"""Paired image/recipe data: synthetic generator, Recipe1M-format loader, batching."""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIALS = (PAD, UNK, MASK)
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?)%'")
_NO_SPACE_AFTER = set("('")


class Tokenizer:
    """Word-level tokenizer: splits on whitespace and isolates punctuation.

    The vocabulary is fixed at construction; unseen words map to ``[UNK]``.
    """

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Tokenizer":
        seen: dict[str, None] = {}
        for text in texts:
            for tok in _TOKEN_RE.findall(text):
                seen.setdefault(tok, None)
        return cls(list(SPECIALS) + sorted(seen))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in _TOKEN_RE.findall(text)]

    def decode(self, ids: Sequence[int]) -> str:
        out = ""
        prev = None
        for i in ids:
            if i == PAD_ID:
                continue
            tok = self.words[i]
            if out and tok[0] not in _NO_SPACE_BEFORE and not (prev and prev in _NO_SPACE_AFTER):
                out += " "
            out += tok
            prev = tok
        return out

    def to_json(self) -> list[str]:
        return list(self.words)


@dataclass
class RecipeDoc:
    id: str
    title: list[int]
    ingredients: list[list[int]]
    instructions: list[list[int]]
    image_ref: str | None = None

    def validate(self, vocab_size: int) -> None:
        if not self.title or not any(self.ingredients) or not any(self.instructions):
            raise ValueError(f"recipe {self.id!r}: empty component after tokenization")
        for seq in [self.title, *self.ingredients, *self.instructions]:
            if any(t < 0 or t >= vocab_size for t in seq):
                raise ValueError(f"recipe {self.id!r}: token id outside vocabulary")


@dataclass
class Pair:
    """One image with its recipe. ``groundtruth`` maps 0-based patch index -> ingredient class."""

    image: np.ndarray
    recipe: RecipeDoc
    groundtruth: dict[int, int] | None = None


# --------------------------------------------------------------------------
# synthetic data

INGREDIENT_NAMES = (
    "tomato", "basil", "garlic", "onion", "carrot", "potato", "chicken", "beef",
    "rice", "pasta", "cheese", "spinach", "mushroom", "pepper", "lemon", "butter",
    "egg", "flour", "sugar", "corn", "beans", "cabbage", "salmon", "shrimp",
    "apple", "banana", "berries", "chocolate", "vanilla", "cream", "yogurt", "olive",
)
DISHES = ("salad", "stew", "bake", "soup", "bowl", "skillet")
QUANTITIES = ("one", "two", "three", "four")
UNITS = ("cup", "tablespoon", "handful", "pinch")
VERBS = ("add", "stir", "chop", "fold", "toss")
TEMPLATE_WORDS = DISHES + QUANTITIES + UNITS + VERBS + (
    "with", "and", "the", "in", "pan", "serve", "warm", ".",
)


def ingredient_name(c: int) -> str:
    return INGREDIENT_NAMES[c] if c < len(INGREDIENT_NAMES) else f"ingredient{c}"


@dataclass(frozen=True)
class SyntheticSpec:
    """Procedural image/recipe generator settings.

    Ingredient class ``c`` always paints patch ``c`` of the grid with a fixed
    class-specific texture, so samples with disjoint ingredient sets never
    share a painted patch.
    """

    vocab_size: int = 128
    n_ingredient_classes: int = 16
    grid: tuple[int, int] = (4, 4)
    patch_size: int = 8
    channels: int = 3
    noise_std: float = 0.05
    seed: int = 0
    k_range: tuple[int, int] = (2, 5)
    text_variation: bool = False

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def reserved_range(self) -> int:
        return self.vocab_size - len(SPECIALS) - len(TEMPLATE_WORDS)

    def validate(self) -> None:
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.n_ingredient_classes > self.reserved_range:
            raise ValueError(
                f"n_ingredient_classes={self.n_ingredient_classes} exceeds the "
                f"{self.reserved_range} vocabulary ids reserved for ingredients"
            )
        if self.n_ingredient_classes > self.n_patches:
            raise ValueError("each ingredient class needs its own patch region")
        lo, hi = self.k_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad k_range {self.k_range}")
        if hi > self.n_ingredient_classes:
            raise ValueError(
                f"k up to {hi} exceeds the {self.n_ingredient_classes} available patch regions"
            )


def synthetic_tokenizer(spec: SyntheticSpec) -> Tokenizer:
    names = [ingredient_name(c) for c in range(spec.n_ingredient_classes)]
    return Tokenizer(list(SPECIALS) + list(TEMPLATE_WORDS) + names)


def class_pattern(c: int, patch_size: int, channels: int) -> np.ndarray:
    """Fixed texture for ingredient class ``c``; independent of the sample seed."""
    rng = np.random.default_rng([0x5EED, c])
    return rng.uniform(0.0, 1.0, size=(patch_size, patch_size, channels)).astype(np.float32)


def patch_slice(index: int, grid: tuple[int, int], patch_size: int) -> tuple[slice, slice]:
    r, c = divmod(index, grid[1])
    return slice(r * patch_size, (r + 1) * patch_size), slice(c * patch_size, (c + 1) * patch_size)


def _synthetic_text(
    classes: Sequence[int], rng: np.random.Generator, vary: bool
) -> tuple[str, list[str], list[str]]:
    """Title, ingredient lines and instruction lines for a set of classes.

    Without ``vary`` every filler word is a fixed function of the class set,
    so the text carries no information beyond the ingredients.
    """
    names = [ingredient_name(c) for c in classes]

    def pick(options, key):
        return options[rng.integers(len(options))] if vary else options[key % len(options)]

    dish = pick(DISHES, sum(classes))
    title = f"{dish} with " + " and ".join(names)
    ingredients = [f"{pick(QUANTITIES, c)} {pick(UNITS, c // 4)} {n}" for c, n in zip(classes, names)]
    order = rng.permutation(len(names)) if vary else range(len(names))
    instructions = [f"{pick(VERBS, classes[j])} the {names[j]} ." for j in order]
    instructions.append("serve warm .")
    return title, ingredients, instructions


def generate_synthetic(spec: SyntheticSpec, n: int, tokenizer: Tokenizer | None = None) -> list[Pair]:
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    tok = tokenizer or synthetic_tokenizer(spec)
    rng = np.random.default_rng(spec.seed)
    size_h = spec.grid[0] * spec.patch_size
    size_w = spec.grid[1] * spec.patch_size
    patterns = [class_pattern(c, spec.patch_size, spec.channels) for c in range(spec.n_ingredient_classes)]
    lo, hi = spec.k_range
    pairs = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        classes = sorted(int(c) for c in rng.choice(spec.n_ingredient_classes, size=k, replace=False))
        image = np.zeros((size_h, size_w, spec.channels), dtype=np.float32)
        gt = {}
        for c in classes:
            rows, cols = patch_slice(c, spec.grid, spec.patch_size)
            image[rows, cols] = patterns[c]
            gt[c] = c
        if spec.noise_std > 0:
            image = image + rng.normal(0.0, spec.noise_std, size=image.shape).astype(np.float32)
            image = np.clip(image, 0.0, 1.0)
        title, ingredients, instructions = _synthetic_text(classes, rng, spec.text_variation)
        sid = f"syn{spec.seed}-{i:05d}"
        doc = RecipeDoc(
            id=sid,
            title=tok.encode(title),
            ingredients=[tok.encode(s) for s in ingredients],
            instructions=[tok.encode(s) for s in instructions],
            image_ref=f"images/{sid}.png",
        )
        pairs.append(Pair(image=image, recipe=doc, groundtruth=gt))
    return pairs


def write_dataset(pairs: Sequence[Pair], out_dir: str | Path, tokenizer: Tokenizer) -> Path:
    """Materialize pairs in Recipe1M format (images as PNG plus ``groundtruth.json``)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, gts = [], {}
    for pair in pairs:
        doc = pair.recipe
        rel = doc.image_ref or f"images/{doc.id}.png"
        pixels = np.round(np.clip(pair.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels.squeeze(-1) if pixels.shape[-1] == 1 else pixels).save(out / rel)
        records.append({
            "id": doc.id,
            "title": tokenizer.decode(doc.title),
            "ingredients": [tokenizer.decode(s) for s in doc.ingredients],
            "instructions": [tokenizer.decode(s) for s in doc.instructions],
            "image": rel,
        })
        if pair.groundtruth is not None:
            gts[doc.id] = {str(p): c for p, c in pair.groundtruth.items()}
    (out / "dataset.json").write_text(json.dumps(records, indent=1))
    (out / "vocab.json").write_text(json.dumps(tokenizer.to_json()))
    if gts:
        (out / "groundtruth.json").write_text(json.dumps(gts, indent=1))
    return out / "dataset.json"


# --------------------------------------------------------------------------
# Recipe1M-format loading

REQUIRED_FIELDS = ("id", "title", "ingredients", "instructions")


class RecordError(ValueError):
    def __init__(self, record_id, message: str):
        super().__init__(f"record {record_id!r}: {message}")
        self.record_id = record_id


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


def load_recipe1m_subset(
    path: str | Path,
    image_root: str | Path | None = None,
    tokenizer: Tokenizer | None = None,
    image_size: int | None = 32,
) -> list[Pair]:
    """Load paired records from a Recipe1M-format JSON array.

    Records without an image are dropped. If no tokenizer is given one is
    built from the text of the retained records. Images that cannot be read
    are skipped and counted in a warning.
    """
    path = Path(path)
    text = path.read_text().strip()
    records = json.loads(text) if text else []
    root = Path(image_root) if image_root is not None else path.parent

    kept = []
    for rec in records:
        rid = rec.get("id", "<no id>")
        for f in REQUIRED_FIELDS:
            if f not in rec:
                raise RecordError(rid, f"missing required field {f!r}")
        if not isinstance(rec["ingredients"], list) or not isinstance(rec["instructions"], list):
            raise RecordError(rid, "ingredients and instructions must be lists of strings")
        if rec.get("image"):
            kept.append(rec)

    if tokenizer is None:
        texts = []
        for rec in kept:
            texts += [rec["title"], *rec["ingredients"], *rec["instructions"]]
        tokenizer = Tokenizer.build(texts)

    gt_path = root / "groundtruth.json"
    gts = json.loads(gt_path.read_text()) if gt_path.exists() else {}

    pairs, unreadable = [], 0
    for rec in kept:
        try:
            image = load_image(root / rec["image"], image_size)
        except (OSError, ValueError):
            unreadable += 1
            continue
        doc = RecipeDoc(
            id=str(rec["id"]),
            title=tokenizer.encode(rec["title"]),
            ingredients=[tokenizer.encode(s) for s in rec["ingredients"]],
            instructions=[tokenizer.encode(s) for s in rec["instructions"]],
            image_ref=rec["image"],
        )
        doc.validate(len(tokenizer))
        gt = gts.get(doc.id)
        pairs.append(Pair(image, doc, {int(p): int(c) for p, c in gt.items()} if gt else None))
    if unreadable:
        warnings.warn(f"skipped {unreadable} record(s) with unreadable images", stacklevel=2)
    return pairs


def load_vocab(path: str | Path) -> Tokenizer:
    return Tokenizer(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# batching


@dataclass
class RecipeBatch:
    """Padded token ids per recipe component with boolean validity masks."""

    title: torch.Tensor
    title_mask: torch.Tensor
    ingredients: torch.Tensor
    ingredients_mask: torch.Tensor
    instructions: torch.Tensor
    instructions_mask: torch.Tensor

    @property
    def components(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [
            (self.title, self.title_mask),
            (self.ingredients, self.ingredients_mask),
            (self.instructions, self.instructions_mask),
        ]

    @property
    def tokens(self) -> torch.Tensor:
        return torch.cat([self.title, self.ingredients, self.instructions], dim=1)

    @property
    def mask(self) -> torch.Tensor:
        return torch.cat([self.title_mask, self.ingredients_mask, self.instructions_mask], dim=1)

    def __len__(self) -> int:
        return self.title.shape[0]


@dataclass
class PairedBatch:
    images: torch.Tensor  # B x C x H x W
    recipes: RecipeBatch
    ids: list[str] = field(default_factory=list)
    groundtruth: list[dict[int, int] | None] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class SequenceCaps:
    title: int = 16
    ingredients: int = 64
    instructions: int = 128


def _pad(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(1, max(len(s) for s in seqs))
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return ids, ids != PAD_ID


def collate_recipes(docs: Sequence[RecipeDoc], caps: SequenceCaps = SequenceCaps()) -> RecipeBatch:
    titles = [d.title[: caps.title] for d in docs]
    ingrs = [[t for line in d.ingredients for t in line][: caps.ingredients] for d in docs]
    instrs = [[t for line in d.instructions for t in line][: caps.instructions] for d in docs]
    for d, *parts in zip(docs, titles, ingrs, instrs):
        if not all(parts):
            raise ValueError(f"recipe {d.id!r} has an empty component")
    t, tm = _pad(titles)
    g, gm = _pad(ingrs)
    s, sm = _pad(instrs)
    return RecipeBatch(t, tm, g, gm, s, sm)


def collate(pairs: Sequence[Pair], caps: SequenceCaps = SequenceCaps(), dtype=torch.float32) -> PairedBatch:
    images = torch.from_numpy(np.stack([p.image for p in pairs])).permute(0, 3, 1, 2).to(dtype)
    return PairedBatch(
        images=images.contiguous(),
        recipes=collate_recipes([p.recipe for p in pairs], caps),
        ids=[p.recipe.id for p in pairs],
        groundtruth=[p.groundtruth for p in pairs],
    )


def batch_indices(n: int, batch_size: int, seed: int, drop_last: bool, epoch: int = 0) -> list[np.ndarray]:
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 so every batch has negatives")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    stop = n - n % batch_size if drop_last else n
    return [order[i : i + batch_size] for i in range(0, stop, batch_size)]


def make_batches(
    pairs: Sequence[Pair],
    batch_size: int,
    seed: int,
    drop_last: bool,
    epoch: int = 0,
    caps: SequenceCaps = SequenceCaps(),
    dtype=torch.float32,
) -> Iterator[PairedBatch]:
    """Yield shuffled batches; the shuffle depends only on ``(seed, epoch)``."""
    for idx in batch_indices(len(pairs), batch_size, seed, drop_last, epoch):
        yield collate([pairs[i] for i in idx], caps, dtype)
