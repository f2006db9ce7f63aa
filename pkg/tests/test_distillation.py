import warnings

import numpy as np
import pytest
import torch
from torch import nn

from recipematch.config import Config
from recipematch.distillation import DistillConfig, ReconstructionHead, ema_update, loss_dist, smooth_l1
from recipematch.masking import MaskSpec, sample_mask
from recipematch.model import RecipeImageModel


def brute_smooth_l1(a, b, beta):
    vals = []
    for x, y in zip(np.ravel(a), np.ravel(b)):
        d = abs(x - y)
        vals.append(0.5 * d * d / beta if d < beta else d - 0.5 * beta)
    return sum(vals) / len(vals)


def test_smooth_l1_analytic_values():
    zero = torch.zeros(1, dtype=torch.float64)
    assert smooth_l1(zero, zero).item() == 0.0
    assert smooth_l1(torch.tensor([2.0], dtype=torch.float64), zero, 1.0).item() == pytest.approx(1.5, abs=1e-12)
    assert smooth_l1(torch.tensor([0.5], dtype=torch.float64), zero, 1.0).item() == pytest.approx(0.125, abs=1e-12)


def test_smooth_l1_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=7) * 2, rng.normal(size=7)
        beta = rng.uniform(0.1, 3)
        got = smooth_l1(torch.tensor(a), torch.tensor(b), beta).item()
        assert got == pytest.approx(brute_smooth_l1(a, b, beta), abs=1e-12)


def test_smooth_l1_rejects_bad_beta():
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(2), torch.zeros(2), 0.0)


def test_smooth_l1_c1_at_beta():
    beta = 0.7
    for side in (-1e-9, 1e-9):
        d = torch.tensor([beta + side], dtype=torch.float64, requires_grad=True)
        smooth_l1(d, torch.zeros(1, dtype=torch.float64), beta).backward()
        assert d.grad.item() == pytest.approx(1.0, abs=1e-8)
    lo = smooth_l1(torch.tensor([beta - 1e-12], dtype=torch.float64), torch.zeros(1, dtype=torch.float64), beta)
    hi = smooth_l1(torch.tensor([beta + 1e-12], dtype=torch.float64), torch.zeros(1, dtype=torch.float64), beta)
    assert abs(lo.item() - hi.item()) < 1e-9


def test_loss_dist_average_of_two_positions():
    pred = torch.zeros(1, 4, 1, dtype=torch.float64)
    target = torch.zeros_like(pred)
    target[0, 1, 0] = 2.0
    target[0, 3, 0] = 0.5
    mask = MaskSpec(torch.tensor([[1, 3]]), 3)
    assert loss_dist(pred, target, mask).item() == pytest.approx(0.8125, abs=1e-12)


def test_loss_dist_zero_when_matching_and_ignores_unmasked():
    target = torch.randn(2, 5, 4)
    mask = sample_mask(4, 0.5, 2, seed=0)
    assert loss_dist(target.clone(), target, mask).item() == 0.0
    pred = torch.randn(2, 5, 4)
    perturbed = pred.clone()
    keep = ~mask.boolean()
    perturbed[keep] += 100.0
    assert loss_dist(perturbed, target, mask).item() == loss_dist(pred, target, mask).item()


def test_loss_dist_gradient_zero_off_mask():
    pred = torch.randn(3, 5, 4, dtype=torch.float64, requires_grad=True)
    mask = sample_mask(4, 0.5, 3, seed=1)
    loss_dist(pred, torch.randn(3, 5, 4, dtype=torch.float64), mask).backward()
    assert torch.equal(pred.grad[~mask.boolean()], torch.zeros_like(pred.grad[~mask.boolean()]))
    assert pred.grad[mask.boolean()].abs().sum() > 0


def test_loss_dist_empty_mask_warns_and_is_zero():
    with pytest.warns(UserWarning):
        out = loss_dist(torch.randn(2, 5, 4), torch.randn(2, 5, 4), MaskSpec.empty(2, 4))
    assert out.item() == 0.0


def test_reconstruction_identity_init():
    head = ReconstructionHead(8, depth=2, heads=2)
    head.identity_init_()
    x = torch.randn(3, 17, 8)
    assert torch.equal(head(x), x)
    assert ReconstructionHead(8)(x).shape == x.shape


def test_reconstruction_single_layer_oracle():
    torch.manual_seed(0)
    d = 2
    head = ReconstructionHead(d, depth=1, heads=1).double()
    x = torch.randn(1, 3, d, dtype=torch.float64)
    blk = head.blocks[0]

    def ln(v, mod):
        mu = v.mean(-1, keepdim=True)
        var = ((v - mu) ** 2).mean(-1, keepdim=True)
        return (v - mu) / torch.sqrt(var + mod.eps) * mod.weight + mod.bias

    a = blk.attn
    h = ln(x[0], blk.norm1)
    q, k, v = h @ a.w_q.weight.T, h @ a.w_k.weight.T, h @ a.w_v.weight.T
    w = torch.softmax(q @ k.T / np.sqrt(d), dim=-1)
    y = x[0] + (w @ v) @ a.out.weight.T + a.out.bias
    h2 = ln(y, blk.norm2)
    fc1, fc2 = blk.mlp[0], blk.mlp[2]
    z = y + torch.nn.functional.gelu(h2 @ fc1.weight.T + fc1.bias) @ fc2.weight.T + fc2.bias
    expected = z @ head.head.weight.T + head.head.bias
    assert torch.allclose(head(x)[0], expected, atol=1e-12)


# ---------------------------------------------------------------- EMA


def _tree(seed, shapes=((3, 4), (5,), (2, 2, 2))):
    g = torch.Generator().manual_seed(seed)
    return {f"p{i}": torch.randn(s, generator=g, dtype=torch.float64) for i, s in enumerate(shapes)}


@pytest.mark.parametrize("m", [0.0, 0.5, 0.9, 0.999, 1.0])
def test_ema_exact_on_parameter_trees(m):
    s, t = _tree(0), _tree(1)
    expected = {k: m * t[k] + (1 - m) * s[k] for k in t}
    before = {k: v.clone() for k, v in t.items()}
    ema_update(s, t, m)
    for k in t:
        assert torch.allclose(t[k], expected[k], atol=1e-12, rtol=0)
    if m == 1.0:
        assert all(torch.equal(t[k], before[k]) for k in t)
    if m == 0.0:
        assert all(torch.equal(t[k], s[k]) for k in t)


def test_ema_analytic_scalar():
    t, s = {"w": torch.ones(1, dtype=torch.float64)}, {"w": torch.zeros(1, dtype=torch.float64)}
    ema_update(s, t, 0.999)
    assert t["w"].item() == 0.999


def test_ema_geometric_convergence():
    s, t = _tree(0), _tree(1)
    gap = lambda: sum(((t[k] - s[k]) ** 2).sum() for k in t).sqrt().item()  # noqa: E731
    g0 = gap()
    for n in range(1, 6):
        ema_update(s, t, 0.9)
        assert gap() == pytest.approx(g0 * 0.9**n, rel=1e-10)


def test_ema_structural_mismatch_rejected():
    with pytest.raises(ValueError):
        ema_update(_tree(0), _tree(1, shapes=((3, 4), (5,))), 0.5)
    with pytest.raises(ValueError):
        ema_update(_tree(0), _tree(1, shapes=((3, 4), (6,), (2, 2, 2))), 0.5)
    with pytest.raises(ValueError):
        ema_update(_tree(0), _tree(1), 1.5)


def test_ema_on_modules():
    a, b = nn.Linear(3, 2), nn.Linear(3, 2)
    expected = [0.25 * pb.detach() + 0.75 * pa.detach() for pa, pb in zip(a.parameters(), b.parameters())]
    ema_update(a, b, 0.25)
    for p, e in zip(b.parameters(), expected):
        assert torch.allclose(p, e)


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(beta=0)
    with pytest.raises(ValueError):
        DistillConfig(ema_momentum=1.1)


# ---------------------------------------------------------------- stop-gradient in the full model


def test_teacher_receives_no_gradient():
    from recipematch.data import SyntheticSpec, collate, generate_synthetic

    cfg = Config(matching_depth=1)
    model = RecipeImageModel(cfg)
    batch = collate(generate_synthetic(SyntheticSpec(), 4))
    mask = sample_mask(16, 0.75, 4, seed=0)
    out = model(batch.images, batch.recipes, mask, with_matching=False)
    loss_dist(out.predicted, out.target, mask).backward()
    for p in model.teacher.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert model.mask_token.grad is not None and model.mask_token.grad.abs().sum() > 0
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.student.parameters())
