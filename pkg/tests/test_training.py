import json
import math

import numpy as np
import pytest
import torch

import recipematch.training as training
from recipematch.config import Config
from recipematch.data import collate, generate_synthetic, synthetic_tokenizer
from recipematch.evaluation import embed_corpus
from recipematch.training import (
    LossBundle,
    NonFiniteLoss,
    TrainingDiverged,
    load_checkpoint,
    loss_itc,
    step_losses,
    total_loss,
    train,
)


def small_config(**overrides) -> Config:
    base = dict(
        image_size=16, patch_size=4, n_classes=8, vocab_size=64, batch_size=4,
        image_depth=1, recipe_depth=1, fusion_depth=1, matching_depth=1, recon_depth=1,
        embed_dim=16, image_hidden=16, recipe_hidden=16, epochs=2, eval_bag_size=8,
    )
    base.update(overrides)
    return Config(**base)


@pytest.fixture(scope="module")
def data():
    cfg = small_config()
    spec = cfg.synthetic(seed=3)
    tok = synthetic_tokenizer(spec)
    return generate_synthetic(spec, 12, tok), generate_synthetic(cfg.synthetic(seed=4), 8, tok), tok


# --------------------------------------------------------------------------
# triplet loss


def itc_oracle(img, rec, margin, mining):
    img = img / np.linalg.norm(img, axis=1, keepdims=True)
    rec = rec / np.linalg.norm(rec, axis=1, keepdims=True)
    b = len(img)
    sims = [[float(img[i] @ rec[j]) for j in range(b)] for i in range(b)]
    halves = []
    for forward in (True, False):
        hinges = []
        for a in range(b):
            row = [max(0.0, margin - sims[a][a] + (sims[a][n] if forward else sims[n][a])) for n in range(b) if n != a]
            hinges.append(row)
        if mining == "hard":
            halves.append(sum(max(r) for r in hinges) / b)
        else:
            viol = [h for r in hinges for h in r if h > 0]
            halves.append(sum(viol) / max(len(viol), 1))
    return sum(halves) / 2


def test_itc_zero_on_orthonormal_pairs():
    x = torch.eye(3, dtype=torch.float64)
    assert float(loss_itc(x, x)) == 0.0
    assert float(loss_itc(x, x, mining="hard")) == 0.0


def test_itc_collapsed_embeddings_cost_margin():
    x = torch.ones(4, 5, dtype=torch.float64)
    assert float(loss_itc(x, x, 0.3)) == pytest.approx(0.3)
    assert float(loss_itc(x, x, 0.3, "hard")) == pytest.approx(0.3)


@pytest.mark.parametrize("mining", ["adaptive", "hard"])
def test_itc_matches_loop_oracle(mining):
    rng = np.random.default_rng(0)
    for _ in range(20):
        b, d = rng.integers(2, 7), rng.integers(2, 6)
        img, rec = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        got = float(loss_itc(torch.tensor(img), torch.tensor(rec), 0.4, mining))
        assert got == pytest.approx(itc_oracle(img, rec, 0.4, mining), abs=1e-10)


def test_itc_rejections():
    with pytest.raises(ValueError):
        loss_itc(torch.ones(1, 3), torch.ones(1, 3))
    with pytest.raises(ValueError):
        loss_itc(torch.eye(2), torch.eye(2), mining="semi")


# --------------------------------------------------------------------------
# combined objective


def test_total_loss_examples():
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    bundle = LossBundle(t(1.0), t(2.0), t(3.0), t(4.0))
    assert float(total_loss(bundle)) == 10.0
    assert float(total_loss(bundle, lambda_itm=0.5, lambda_dist=2.0)) == 11.5
    assert float(total_loss(bundle, gc_weight=0.0)) == 8.0
    assert float(total_loss(LossBundle(t(1.0)))) == 1.0


def test_total_loss_names_non_finite_component():
    bundle = LossBundle(torch.tensor(1.0), torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLoss) as err:
        total_loss(bundle)
    assert err.value.component == "L_GC"


def test_lc_is_wired_into_matching_gradients(data):
    pairs, _, _ = data
    grads = []
    for lc_weight in (1.0, 0.0):
        cfg = small_config(lc_weight=lc_weight, lambda_dist=0.0, mask_ratio=0.0)
        torch.manual_seed(0)
        model = training.RecipeImageModel(cfg)
        batch = collate(pairs[:4], cfg.caps())
        _, loss, _ = step_losses(model, batch, cfg, torch.Generator().manual_seed(0))
        loss.backward()
        grads.append(torch.cat([p.grad.flatten() for p in model.matcher.parameters() if p.grad is not None]))
    assert not torch.allclose(grads[0], grads[1])


# --------------------------------------------------------------------------
# loop


def test_zero_epochs_returns_initial_weights(data):
    pairs, _, _ = data
    res = train(pairs, small_config(epochs=0))
    assert res.steps == 0 and res.history == []
    torch.manual_seed(0)
    init = training.RecipeImageModel(small_config(epochs=0)).state_dict()
    assert all(torch.equal(init[k], v) for k, v in res.checkpoint["state"].items())


def test_training_rejects_tiny_sets(data):
    pairs, _, _ = data
    with pytest.raises(ValueError):
        train([], small_config())
    with pytest.raises(ValueError):
        train(pairs[:3], small_config())


def test_frozen_image_encoder_stays_fixed(data):
    pairs, _, _ = data
    res = train(pairs, small_config(epochs=1, freeze_image_encoder_epochs=1))
    torch.manual_seed(0)
    init = training.RecipeImageModel(small_config()).student.state_dict()
    after = res.model.student.state_dict()
    assert all(torch.equal(init[k], after[k]) for k in init)
    res2 = train(pairs, small_config(epochs=2, freeze_image_encoder_epochs=1))
    after2 = res2.model.student.state_dict()
    assert any(not torch.equal(init[k], after2[k]) for k in init)


def test_identical_seeds_give_identical_traces(data):
    pairs, val, _ = data
    a = train(pairs, small_config(), val_pairs=val)
    b = train(pairs, small_config(), val_pairs=val)
    assert a.history == b.history and a.validation == b.validation
    c = train(pairs, small_config(seed=1), val_pairs=val)
    assert a.history != c.history


def test_temperature_stays_clamped(data):
    pairs, _, _ = data
    res = train(pairs, small_config(temperature_init=0.01, lr_main=0.5))
    tau = res.model.matcher.temperature.item()
    assert 0.01 <= tau <= 1.0


def test_metrics_and_checkpoints_are_written(data, tmp_path):
    pairs, val, tok = data
    res = train(pairs, small_config(lambda_dist=0.0), val_pairs=val, tokenizer=tok, run_dir=tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in lines if "step" in r and "validation" not in r]
    assert len(steps) == res.steps
    assert set(steps[0]) == {"step", "epoch", "L", "L_itc", "L_GC", "L_LC", "L_dist", "lr"}
    assert steps[0]["L_dist"] is None
    assert sum("validation" in r for r in lines) == 2
    assert (tmp_path / "checkpoint.pt").exists() and (tmp_path / "best.pt").exists()

    model, tok2, ckpt = load_checkpoint(tmp_path / "checkpoint.pt")
    assert tok2.words == tok.words and ckpt["step"] == res.steps
    a, b = embed_corpus(model, val), embed_corpus(res.model, val)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_load_checkpoint_rejects_unknown_format():
    with pytest.raises(ValueError):
        load_checkpoint({"format": "other"})


def test_divergence_reports_last_good_checkpoint(data, monkeypatch):
    pairs, _, _ = data
    real = training.loss_gc
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        value = real(*args, **kwargs)
        return value * math.nan if calls["n"] == 3 else value

    monkeypatch.setattr(training, "loss_gc", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train(pairs, small_config())
    assert "L_GC" in str(err.value)
    ckpt = err.value.checkpoint
    assert ckpt["step"] == 2
    assert all(torch.isfinite(v).all() for v in ckpt["state"].values() if v.is_floating_point())


def test_training_beats_derangement_on_train_pairs(data):
    """Trained embeddings rank the true pairs above a random derangement."""
    pairs, _, _ = data
    res = train(pairs, small_config(epochs=30, lambda_dist=0.0, mask_ratio=0.0))
    img, rec = embed_corpus(res.model, pairs)
    sim = img @ rec.T
    true = np.diag(sim).mean()
    rng = np.random.default_rng(0)
    shuffled = []
    for _ in range(200):
        perm = rng.permutation(len(pairs))
        while np.any(perm == np.arange(len(pairs))):
            perm = rng.permutation(len(pairs))
        shuffled.append(sim[np.arange(len(pairs)), perm].mean())
    assert true > np.quantile(shuffled, 0.99)
