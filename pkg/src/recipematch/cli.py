"""Command line entry point: generate-data, train, eval, ablate, retrieve, check.

Every config key is a flag (``mask_ratio`` -> ``--mask-ratio``). Values come
from defaults, then ``--config FILE``, then flags. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import KEYS, RunConfig, UnknownKeyError, read_config_file
from .data import (
    Pair,
    RecipeDoc,
    Tokenizer,
    collate,
    collate_recipes,
    generate_synthetic,
    load_image,
    load_recipe1m_subset,
    load_vocab,
    synthetic_tokenizer,
    write_dataset,
)

log = logging.getLogger("recipematch")

COMMANDS = ("generate-data", "train", "eval", "ablate", "retrieve", "check")
SPLITS = {"train": 0, "val": 1, "test": 2}

# keys that fix the network's shape; a checkpoint cannot be used with other values
ARCH_KEYS = (
    "image_size", "patch_size", "channels", "vocab_size", "title_cap", "ingredients_cap",
    "instructions_cap", "image_depth", "image_heads", "image_hidden", "recipe_depth",
    "recipe_heads", "recipe_hidden", "fusion_depth", "fusion_heads", "embed_dim",
    "matching_depth", "matching_heads", "matching_cross_residual", "recon_depth",
    "recon_heads", "mask_recipe",
)


class UsageError(Exception):
    pass


class QueryError(UsageError):
    def __init__(self, field: str, message: str):
        super().__init__(f"query field {field!r}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# argument parsing


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recipematch", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML file of config keys")
    common.add_argument("--run-root", default="run", help="parent of the timestamped run directory")
    keys = common.add_argument_group("config keys")
    for key, f in KEYS.items():
        keys.add_argument(_flag(key), dest=f"cfg__{key}", metavar=f.type.upper(), help=f"default: {f.default}")

    p = sub.add_parser("generate-data", parents=[common], help="write synthetic train/val/test splits")
    p.add_argument("--out", help="output directory (default: <run dir>/data)")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory or Recipe1M-format JSON (default: synthetic)")
    p.add_argument("--image-root", help="directory image paths are relative to")

    p = sub.add_parser("eval", parents=[common], help="bagged retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory or JSON (default: synthetic test split)")
    p.add_argument("--image-root")
    p.add_argument("--split", default="test", choices=sorted(SPLITS))

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    p.add_argument("--study", choices=("losses", "mask-ratio"), default="losses",
                   help="losses: add loss terms one at a time; mask-ratio: sweep the masking ratio")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per variant")
    p.add_argument("--data")
    p.add_argument("--image-root")

    p = sub.add_parser("retrieve", parents=[common], help="top-k retrieval for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="recipe JSON file or image file")
    p.add_argument("--corpus", help="dataset directory or JSON (default: synthetic test split)")
    p.add_argument("--image-root")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("check", parents=[common], help="finite-difference, oracle and invariant suites")
    p.add_argument("--n-oracle", type=int, default=100, help="randomized instances per oracle")
    return parser


def parse_args(argv: Sequence[str]) -> tuple[str, RunConfig, argparse.Namespace]:
    """Parse ``argv`` into (command, resolved config, namespace).

    Raises ``UsageError`` for a missing command, unknown key or bad value.
    argparse itself exits with status 2 on unknown flags.
    """
    parser = build_parser()
    args = parser.parse_args(list(argv))
    if not args.command:
        raise UsageError(parser.format_usage().strip())
    flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__") and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        run = RunConfig.resolve(file_values, flags)
    except (UnknownKeyError, ValueError, KeyError, OSError) as exc:
        raise UsageError(str(exc).strip("'\"")) from exc
    return args.command, run, args


# ---------------------------------------------------------------------------
# helpers


def make_run_dir(root: str | Path) -> Path:
    base = Path(root) / time.strftime("%Y%m%d-%H%M%S")
    path, n = base, 0
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _dataset_file(path: Path, split: str) -> Path:
    if path.is_dir():
        for cand in (path / split / "dataset.json", path / "dataset.json"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"no dataset.json for split {split!r} under {path}")
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def load_split(
    data: str | None, split: str, cfg, image_root: str | None = None, tokenizer: Tokenizer | None = None
) -> tuple[list[Pair], Tokenizer]:
    """Pairs for ``split`` from a dataset path, or freshly generated synthetic pairs."""
    if data is None:
        spec = cfg.synthetic(seed=cfg.data_seed + SPLITS[split])
        n = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}[split]
        tok = tokenizer or synthetic_tokenizer(spec)
        return generate_synthetic(spec, n, tok), tok
    file = _dataset_file(Path(data), split)
    vocab = file.parent / "vocab.json"
    if tokenizer is None and vocab.exists():
        tokenizer = load_vocab(vocab)
    if tokenizer is None:
        records = json.loads(file.read_text() or "[]")
        texts = []
        for rec in records:
            if rec.get("image"):
                texts += [rec.get("title", ""), *rec.get("ingredients", []), *rec.get("instructions", [])]
        tokenizer = Tokenizer.build(texts)
    pairs = load_recipe1m_subset(file, image_root or file.parent, tokenizer, cfg.image_size)
    return pairs, tokenizer


def _check_vocab(cfg, tok: Tokenizer) -> None:
    if len(tok) > cfg.vocab_size:
        raise RuntimeError(f"vocabulary has {len(tok)} words but vocab_size={cfg.vocab_size}; pass --vocab-size {len(tok)}")


def _write(run_dir: Path, name: str, text: str) -> Path:
    path = run_dir / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(run: RunConfig, args, run_dir: Path) -> int:
    cfg = run.config
    out = Path(args.out) if args.out else run_dir / "data"
    tok = None
    for split in SPLITS:
        pairs, tok = load_split(None, split, cfg, tokenizer=tok)
        write_dataset(pairs, out / split, tok)
        print(f"{split}: {len(pairs)} pairs -> {out / split / 'dataset.json'}")
    return 0


def cmd_train(run: RunConfig, args, run_dir: Path) -> int:
    from .training import train

    cfg = run.config
    pairs, tok = load_split(args.data, "train", cfg, args.image_root)
    try:
        val, _ = load_split(args.data, "val", cfg, args.image_root, tok)
    except FileNotFoundError:
        val = None
    _check_vocab(cfg, tok)

    def report(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d  L=%.4f", rec["step"], rec["L"])

    res = train(pairs, cfg, val_pairs=val, tokenizer=tok, run_dir=run_dir, on_step=report)
    print(f"trained {res.steps} steps; checkpoint -> {run_dir / 'checkpoint.pt'}")
    if res.validation:
        best = max(res.validation, key=lambda v: v["r1"])
        print(f"best validation R@1 {best['r1']:.1f} at epoch {best['epoch']} (medR {best['medR']:.1f})")
    return 0


def _load_model(run: RunConfig, checkpoint: str):
    from .training import load_checkpoint

    model, tok, ckpt = load_checkpoint(checkpoint)
    mismatched = [
        k for k in ARCH_KEYS
        if run.provenance[k] != "default" and getattr(run.config, k) != getattr(model.cfg, k)
    ]
    if mismatched:
        raise RuntimeError(f"checkpoint/config mismatch on {', '.join(mismatched)}")
    overrides = {k: getattr(run.config, k) for k in ("eval_bag_size", "eval_n_bags", "seed")}
    cfg = model.cfg.replace(**overrides)
    data_keys = ("n_train", "n_val", "n_test", "data_seed", "noise_std", "text_variation", "n_classes")
    cfg = cfg.replace(**{k: getattr(run.config, k) for k in data_keys if run.provenance[k] != "default"})
    return model, tok, cfg


def cmd_eval(run: RunConfig, args, run_dir: Path) -> int:
    from .evaluation import evaluate

    model, tok, cfg = _load_model(run, args.checkpoint)
    pairs, _ = load_split(args.data, args.split, cfg, args.image_root, tok)
    reports = evaluate(model, pairs, cfg, seed=cfg.seed)
    _write(run_dir, "eval.json", json.dumps({d: r.to_dict() for d, r in reports.items()}, indent=1))
    text = "\n\n".join(r.table() for r in reports.values())
    _write(run_dir, "eval.txt", text + "\n")
    print(text)
    return 0


def cmd_ablate(run: RunConfig, args, run_dir: Path) -> int:
    from .evaluation import (
        LOSS_ABLATION_VARIANTS,
        MASK_RATIO_VARIANTS,
        REFERENCE_LOSS_ABLATION_R1,
        REFERENCE_MASK_RATIO_R1,
        run_ablation,
    )

    cfg = run.config
    train_pairs, tok = load_split(args.data, "train", cfg, args.image_root)
    test_pairs, _ = load_split(args.data, "test", cfg, args.image_root, tok)
    _check_vocab(cfg, tok)
    if args.study == "losses":
        variants, refs = LOSS_ABLATION_VARIANTS, REFERENCE_LOSS_ABLATION_R1
    else:
        variants = MASK_RATIO_VARIANTS
        refs = {f"ratio {r:.2f}": v for r, v in REFERENCE_MASK_RATIO_R1.items()}
    table = run_ablation(train_pairs, test_pairs, cfg, variants, range(args.seeds), references=refs)
    _write(run_dir, "ablation.json", json.dumps(table.to_dict(), indent=1))
    _write(run_dir, "ablation.txt", table.text() + "\n")
    print(table.text())
    return 1 if any(r.error for r in table.rows) else 0


def read_recipe_query(path: Path, tok: Tokenizer) -> RecipeDoc:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise QueryError("<document>", f"not valid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise QueryError("<document>", "must be a JSON object")
    if not isinstance(raw.get("title"), str) or not raw["title"].strip():
        raise QueryError("title", "must be a non-empty string")
    for field in ("ingredients", "instructions"):
        value = raw.get(field)
        if not isinstance(value, list) or not value or not all(isinstance(s, str) for s in value):
            raise QueryError(field, "must be a non-empty list of strings")
    doc = RecipeDoc(
        id=str(raw.get("id", path.stem)),
        title=tok.encode(raw["title"]),
        ingredients=[tok.encode(s) for s in raw["ingredients"]],
        instructions=[tok.encode(s) for s in raw["instructions"]],
    )
    for field, seqs in (("title", [doc.title]), ("ingredients", doc.ingredients), ("instructions", doc.instructions)):
        if not any(seqs):
            raise QueryError(field, "is empty after tokenization")
    return doc


def retrieve(model, cfg, query: RecipeDoc | np.ndarray, corpus: Sequence[Pair], k: int) -> dict:
    """Rank ``corpus`` against one query by cosine similarity and keep the top ``k``."""
    from .evaluation import embed_corpus

    if k < 0:
        raise UsageError("k must be >= 0")
    img_emb, rec_emb = embed_corpus(model, corpus, cfg)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        if isinstance(query, RecipeDoc):
            q = model.recipe_embedding(collate_recipes([query], cfg.caps()))
            direction, targets = "recipe2image", img_emb
        else:
            images = torch.from_numpy(query[None]).permute(0, 3, 1, 2).to(dtype)
            q = model.image_embedding(images)
            direction, targets = "image2recipe", rec_emb
    scores = targets @ q.double().numpy()[0]
    order = np.argsort(-scores, kind="stable")[: min(k, len(corpus))]
    out = {
        "direction": direction,
        "k": k,
        "corpus_size": len(corpus),
        "results": [
            {"rank": r + 1, "id": corpus[i].recipe.id, "score": float(scores[i])} for r, i in enumerate(order)
        ],
    }
    if k > len(corpus):
        out["note"] = f"k={k} exceeds the corpus size {len(corpus)}; returning the full ranking"
    return out


def cmd_retrieve(run: RunConfig, args, run_dir: Path) -> int:
    model, tok, cfg = _load_model(run, args.checkpoint)
    if tok is None:
        raise RuntimeError("checkpoint carries no vocabulary")
    qpath = Path(args.query)
    if not qpath.exists():
        raise UsageError(f"query file {qpath} does not exist")
    if qpath.suffix.lower() == ".json":
        query = read_recipe_query(qpath, tok)
    else:
        try:
            query = load_image(qpath, cfg.image_size)
        except OSError as exc:
            raise QueryError("<image>", f"unreadable image ({exc})") from exc
    corpus, _ = load_split(args.corpus, "test", cfg, args.image_root, tok)
    result = retrieve(model, cfg, query, corpus, args.k)
    result["query"] = str(qpath)
    _write(run_dir, "retrieval.json", json.dumps(result, indent=1))
    lines = [f"query {qpath} ({result['direction']}), top {args.k} of {len(corpus)}"]
    lines += [f"{r['rank']:4d}  {r['score']:+.4f}  {r['id']}" for r in result["results"]]
    if "note" in result:
        lines.append(f"note: {result['note']}")
    text = "\n".join(lines)
    _write(run_dir, "retrieval.txt", text + "\n")
    print(text)
    return 0


def cmd_check(run: RunConfig, args, run_dir: Path) -> int:
    from .checks import invariant_run, run_all

    results = run_all(n_oracle=args.n_oracle, seed=run.config.seed) + invariant_run(seed=run.config.seed)
    text = "\n".join(r.line() for r in results)
    _write(run_dir, "check.txt", text + "\n")
    print(text)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


HANDLERS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "retrieve": cmd_retrieve,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        command, run, args = parse_args(argv)
    except UsageError as exc:
        print(f"recipematch: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse: --help exits 0, bad flags exit 2
        return int(exc.code or 0)

    run_dir = make_run_dir(args.run_root)
    (run_dir / "config.resolved").write_text(run.resolved_text())
    try:
        return HANDLERS[command](run, args, run_dir)
    except UsageError as exc:
        print(f"recipematch {command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit status 1
        log.debug("failure", exc_info=True)
        print(f"recipematch {command}: error: {exc}", file=sys.stderr)
        return 1
