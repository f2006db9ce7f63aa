import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from recipematch.checks import oracle_rank_metrics, tiny_config
from recipematch.config import Config
from recipematch.data import generate_synthetic, synthetic_tokenizer
from recipematch.evaluation import (
    LOSS_ABLATION_VARIANTS,
    attention_localization,
    embed_corpus,
    evaluate,
    localization_from_attention,
    paired_difference_test,
    rank_and_score,
    rank_metrics,
    run_ablation,
    true_pair_ranks,
)
from recipematch.model import RecipeImageModel
from recipematch.training import InvariantViolation
from recipematch.evaluation import RetrievalReport


def test_identity_similarity_is_perfect():
    rep = rank_and_score(np.eye(6), np.eye(6), bag_size=6, n_bags=1)
    assert rep.medR == 1.0 and rep.r1 == 100.0


def test_negative_identity_ranks_last():
    m = rank_metrics(-np.eye(4))
    assert m["medR"] == 4.0 and m["r1"] == 0.0 and m["r5"] == 100.0


def test_ties_count_against_the_true_item():
    assert true_pair_ranks(np.ones((3, 3))).tolist() == [3, 3, 3]


def test_random_matrix_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    img, rec = rng.normal(size=(50, 7)), rng.normal(size=(50, 7))
    rep = rank_and_score(img, rec, bag_size=50, n_bags=1)
    oracle = oracle_rank_metrics(img, rec)
    assert rep.summary() == pytest.approx(oracle, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 64), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_rank_and_score_property(n, d, seed):
    rng = np.random.default_rng(seed)
    img, rec = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    rep = rank_and_score(img, rec, bag_size=n, n_bags=1)
    assert rep.summary() == pytest.approx(oracle_rank_metrics(img, rec), abs=1e-6)
    assert rep.r1 <= rep.r5 <= rep.r10


def test_bag_determinism_and_seed_dependence():
    rng = np.random.default_rng(1)
    img, rec = rng.normal(size=(40, 5)), rng.normal(size=(40, 5))
    a = rank_and_score(img, rec, bag_size=10, n_bags=5, seed=3)
    b = rank_and_score(img, rec, bag_size=10, n_bags=5, seed=3)
    c = rank_and_score(img, rec, bag_size=10, n_bags=5, seed=4)
    assert a.to_dict() == b.to_dict()
    assert a.per_bag != c.per_bag


def test_direction_symmetry_on_symmetric_similarity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 4))
    a = rank_and_score(x, x, "image2recipe", 12, 3, seed=0)
    b = rank_and_score(x, x, "recipe2image", 12, 3, seed=0)
    assert a.summary() == b.summary()


def test_rank_and_score_rejections():
    x = np.eye(4)
    with pytest.raises(ValueError):
        rank_and_score(x, x, bag_size=1)
    with pytest.raises(ValueError):
        rank_and_score(x, x, bag_size=5)
    with pytest.raises(ValueError):
        rank_and_score(x, x[:3], bag_size=3)
    with pytest.raises(ValueError):
        rank_and_score(x, x, "sideways", bag_size=3)


def test_report_rejects_non_monotone_recall():
    with pytest.raises(InvariantViolation):
        RetrievalReport("image2recipe", 4, 1, [{"medR": 1.0, "r1": 50.0, "r5": 40.0, "r10": 100.0}])


@pytest.fixture(scope="module")
def small_model():
    cfg = Config(image_size=16, patch_size=4, n_classes=8, vocab_size=64, embed_dim=16,
                 image_hidden=16, recipe_hidden=16, image_depth=1, matching_depth=1, recon_depth=1)
    torch.manual_seed(0)
    spec = cfg.synthetic(seed=5, noise_std=0.0)
    tok = synthetic_tokenizer(spec)
    return RecipeImageModel(cfg), generate_synthetic(spec, 12, tok), tok


def test_embed_corpus_contract(small_model):
    model, pairs, _ = small_model
    img, rec = embed_corpus(model, pairs)
    assert img.shape[0] == rec.shape[0] == len(pairs)
    assert np.allclose(np.linalg.norm(img, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(rec, axis=1), 1, atol=1e-6)
    img2, rec2 = embed_corpus(model, pairs)
    assert np.array_equal(img, img2) and np.array_equal(rec, rec2)


def test_mask_ratio_ignored_at_inference(small_model):
    model, pairs, _ = small_model
    a = embed_corpus(model, pairs, model.cfg.replace(mask_ratio=0.25))
    b = embed_corpus(model, pairs, model.cfg.replace(mask_ratio=0.75))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_evaluate_reports_both_directions(small_model):
    model, pairs, _ = small_model
    reps = evaluate(model, pairs, model.cfg.replace(eval_bag_size=10, eval_n_bags=2))
    assert set(reps) == {"image2recipe", "recipe2image"}
    assert all(r.bag_size == 10 for r in reps.values())


def test_localization_one_hot_attention_scores_one():
    # two samples, P=4, tokens [5, 6, 7]; patch p holds class gt[p]
    tokens = [np.array([5, 6, 7]), np.array([6, 7, 5])]
    gts = [{0: 0, 2: 1}, {1: 2, 3: 0}]
    class_tokens = {0: 5, 1: 6, 2: 7}
    attn = []
    for tok, gt in zip(tokens, gts):
        a = np.full((5, 3), 1 / 3)
        for p, c in gt.items():
            a[p + 1] = (tok == class_tokens[c]).astype(float)
        attn.append(a)
    res = localization_from_attention(attn, tokens, gts, class_tokens, n_perm=50)
    assert res.score == pytest.approx(1.0)
    assert res.chance == pytest.approx(1 / 3)
    assert res.null_mean < 1.0


def test_untrained_model_localization_is_near_null(small_model):
    model, pairs, tok = small_model
    res = attention_localization(model, pairs, tok, n_perm=200)
    assert abs(res.score - res.null_mean) <= 2 * res.null_std + 1e-9


def test_localization_rejects_non_synthetic(small_model):
    model, pairs, tok = small_model
    stripped = [type(p)(p.image, p.recipe, None) for p in pairs]
    with pytest.raises(ValueError):
        attention_localization(model, stripped, tok)


def test_paired_difference_test():
    a = np.array([3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
    diff, p = paired_difference_test(a, a - 1.0, n_perm=500)
    assert diff == pytest.approx(1.0)
    assert p < 0.1
    _, p0 = paired_difference_test(a, a, n_perm=100)
    assert p0 == 1.0


def test_single_variant_ablation_and_failed_row():
    cfg = tiny_config(image_size=16, patch_size=4, vocab_size=64, batch_size=4, max_steps=2,
                      eval_bag_size=8, eval_n_bags=1, n_classes=8)
    spec = cfg.synthetic(seed=0)
    tok = synthetic_tokenizer(spec)
    train, test = generate_synthetic(spec, 8, tok), generate_synthetic(cfg.synthetic(seed=1), 8, tok)
    variants = {"Baseline": LOSS_ABLATION_VARIANTS["Baseline"], "broken": {"lambda_itm": -1.0}}
    table = run_ablation(train, test, cfg, variants, seeds=[0])
    assert [r.name for r in table.rows] == ["Baseline", "broken"]
    assert len(table["Baseline"].r1) == 1 and table["Baseline"].error is None
    assert "lambda_itm" in table["broken"].error
    assert "failed" in table.text()
