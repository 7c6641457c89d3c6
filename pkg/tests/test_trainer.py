import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vqfont import trainer as tr
from vqfont.codebook import TrainingDiverged, VQAutoencoder
from vqfont.trainer import (ProjectionDiscriminator, adversarial_losses, batch_contrastive_loss,
                            discriminator_objective, frozen_hash, generator_objective,
                            load_generator, matching_losses, style_contrastive_loss, train)

from micro import micro_models, objective_gradient_check
from oracles import rel_err


def test_hinge_hand_points():
    d, _ = adversarial_losses(torch.tensor([2.0]), torch.tensor([-2.0]))
    assert d.item() == 0
    d, g = adversarial_losses(torch.tensor([0.0]), torch.tensor([0.0]))
    assert d.item() == 2 and g.item() == 0
    _, g = adversarial_losses(torch.tensor([0.0]), torch.tensor([3.0]))
    assert g.item() == -3


@settings(max_examples=30, deadline=None)
@given(r=st.floats(-5, 5), f=st.floats(-5, 5))
def test_hinge_is_nonnegative(r, f):
    d, _ = adversarial_losses(torch.tensor([r]), torch.tensor([f]))
    assert d.item() >= 0


def test_matching_identity_and_extremes():
    torch.manual_seed(0)
    disc = ProjectionDiscriminator(2, 3, width=4).eval()
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    l_img, l_feat = matching_losses(x, x.clone(), disc, [0, 1], [2, 0])
    assert l_img.item() == 0 and l_feat.item() == 0
    l_img, _ = matching_losses(torch.ones(1, 1, 8, 8), -torch.ones(1, 1, 8, 8))
    assert l_img.item() == 2


def test_image_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (2, 1, 6, 6)), rng.uniform(-1, 1, (2, 1, 6, 6))
    want = sum(abs(x - y) for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
    got, _ = matching_losses(torch.as_tensor(a), torch.as_tensor(b))
    assert abs(got.item() - want) < 1e-6


@pytest.mark.parametrize("n_neg", [1, 3, 7])
def test_contrastive_uniform_similarity(n_neg):
    code = torch.randn(5, 4)
    negs = code[None].repeat(n_neg, 1, 1)
    loss = style_contrastive_loss(code, code.clone(), negs, temperature=0.1)
    assert abs(loss.item() - math.log(1 + n_neg)) < 1e-5


def test_contrastive_hand_value():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([[1.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    n = torch.tensor([[[-1.0, 0.0], [1.0, 0.0]]], dtype=torch.float64)
    tau = 0.5
    s_pos = (1 / math.sqrt(2) + 1.0) / 2 / tau
    s_neg = (-1.0 + 0.0) / 2 / tau
    want = -math.log(math.exp(s_pos) / (math.exp(s_pos) + math.exp(s_neg)))
    assert abs(style_contrastive_loss(a, p, n, tau).item() - want) < 1e-6


def test_contrastive_limit():
    a = torch.randn(4, 3)
    loss = style_contrastive_loss(a, a, -a[None], temperature=1e-3)
    assert loss.item() < 1e-6


def test_contrastive_needs_negatives():
    with pytest.raises(ValueError):
        style_contrastive_loss(torch.randn(3, 2), torch.randn(3, 2), [])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_contrastive_row_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    a, p = torch.randn(6, 4, generator=g), torch.randn(6, 4, generator=g)
    n = torch.randn(3, 6, 4, generator=g)
    perm = torch.randperm(6, generator=g)
    base = style_contrastive_loss(a, p, n)
    assert torch.allclose(base, style_contrastive_loss(a[perm], p[perm], n[:, perm]), atol=1e-5)


def test_batch_contrastive_uses_other_fonts():
    a = torch.randn(3, 4, 2)
    lone = batch_contrastive_loss(a, a, ["f", "f", "f"], 0.1)
    assert lone.item() == 0
    mixed = batch_contrastive_loss(a, a, ["f", "g", "f"], 0.1)
    assert mixed.item() > 0


def test_projection_discriminator_structure():
    torch.manual_seed(0)
    disc = ProjectionDiscriminator(3, 4, width=4).eval()
    x = torch.rand(1, 1, 32, 32) * 2 - 1
    out0 = disc(x, [0], [1])
    out1 = disc(x, [2], [1])
    assert len(out0.features) == 4
    assert out0.logit.item() != out1.logit.item()
    with torch.no_grad():
        disc.font_embed.weight.zero_()
        disc.char_embed.weight.zero_()
    h = disc(x, [0], [1])
    pooled = torch.nn.functional.leaky_relu(h.features[-1], 0.2).mean(dim=(2, 3))
    assert torch.allclose(h.logit, disc.score(pooled).squeeze(1), atol=1e-6)
    with pytest.raises(ValueError, match="style label"):
        disc(x, [3], [0])


def _snapshot(module):
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def _changed(before, module):
    return [n for n, p in module.named_parameters() if not torch.equal(before[n], p.detach())]


def test_steps_touch_only_their_own_parameters(tiny_cfg, tiny_manifest):
    gen, disc, batch = micro_models(tiny_cfg, tiny_manifest)
    opt_g = torch.optim.Adam(gen.trainable_parameters(), lr=1e-3)
    opt_d = torch.optim.Adam(disc.parameters(), lr=1e-3)
    frozen = frozen_hash(gen)

    g0 = _snapshot(gen)
    loss_d = discriminator_objective(gen, disc, batch)
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()
    assert not _changed(g0, gen)

    d0 = _snapshot(disc)
    total, _, _ = generator_objective(gen, disc, batch, tiny_cfg)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    assert not _changed(d0, disc)
    assert _changed(g0, gen)
    assert frozen_hash(gen) == frozen
    assert not any(n.startswith("content_encoder") for n in _changed(g0, gen))


def test_adversarial_warmup_ramps_g_term(tiny_cfg, tiny_manifest):
    assert tr.adversarial_weight(tiny_cfg, 5) == 1.0
    cfg = tiny_cfg.replace(adv_warmup=4)
    assert [tr.adversarial_weight(cfg, s) for s in (1, 2, 4, 9)] == [0.25, 0.5, 1.0, 1.0]
    gen, disc, batch = micro_models(cfg, tiny_manifest, torch.float64)
    gen.eval()
    disc.eval()
    full, parts, _ = generator_objective(gen, disc, batch, cfg)
    half, _, _ = generator_objective(gen, disc, batch, cfg, step=2)
    assert torch.allclose(full - half, 0.5 * parts["loss_adv_g"], atol=1e-9)


def test_generator_objective_gradient_double(tiny_cfg, tiny_manifest):
    a, n = objective_gradient_check(tiny_cfg, tiny_manifest, torch.float64, 1e-6)
    assert len(a) == 10
    assert rel_err(a, n) <= 1e-4


def test_generator_objective_gradient_single(tiny_cfg, tiny_manifest):
    a, n = objective_gradient_check(tiny_cfg, tiny_manifest, torch.float32, 1e-2)
    assert rel_err(a, n) <= 1e-2


def test_trainer_end_to_end_tiny(tiny_cfg, tiny_manifest, tiny_vq, tmp_path):
    cfg = tiny_cfg.replace(train_steps=4)
    res = train(tiny_manifest, tiny_vq, cfg, out_dir=tmp_path / "run")
    assert res.frozen_hash_before == res.frozen_hash_after
    for sub in ("checkpoints", "samples", "reports"):
        assert (tmp_path / "run" / sub).is_dir()
    assert (tmp_path / "run" / "config.yaml").exists()
    with open(tmp_path / "run" / "reports" / "loss_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L_adv^D", "L_adv^G", "L_img", "L_feat", "L_cst"]
    assert len(rows) == 5 and all(math.isfinite(float(v)) for v in rows[-1])
    gen, disc, cfg2, blob = load_generator(res.checkpoint)
    assert cfg2.to_dict() == {**cfg.to_dict(), "device": "cpu"}
    assert blob["frozen_hash"] == res.frozen_hash_after
    x = torch.zeros(1, 1, 32, 32)
    refs = torch.zeros(1, 2, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(gen(x, refs)[0], res.generator.eval()(x, refs)[0])


def test_trainer_detects_frozen_drift(tiny_cfg, tiny_manifest, tmp_path):
    cfg = tiny_cfg.replace(train_steps=4, checkpoint_every=2)
    vq = VQAutoencoder(cfg).freeze()
    holder = {}
    orig = tr.build_models

    def spy(*a, **k):
        holder["gen"], d = orig(*a, **k)
        return holder["gen"], d

    def tamper(row, elapsed):
        holder["gen"].codes.add_(1.0)

    tr.build_models = spy
    try:
        with pytest.raises(tr.FrozenParameterDrift):
            train(tiny_manifest, vq, cfg, out_dir=tmp_path / "r", progress=tamper)
    finally:
        tr.build_models = orig


def test_trainer_raises_on_nan(tiny_cfg, tiny_manifest, monkeypatch):
    vq = VQAutoencoder(tiny_cfg).freeze()
    monkeypatch.setattr(tr, "image_matching_loss", lambda a, b: (a - b).abs().mean() * float("nan"))
    with pytest.raises(TrainingDiverged):
        train(tiny_manifest, vq, tiny_cfg)
