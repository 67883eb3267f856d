import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fpforge import toy
from fpforge.errors import EmptyMaterialError, LineageError, LossError, RenderError, TrainConfigError
from fpforge.render import (LossWeights, RendererConfig, RendererNet, RendererParams, combine_generator_loss,
                            embedding_loss, identity_loss, load_lineage, render_texture, renderer_losses,
                            run_schedule, sample_texture_latent, style_params, train_renderer)

TINY = dict(ch=4, depth=2, d_ch=2, in_size=32, out_size=64, batch_size=2, steps=2, log_every=0)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return toy.make_corpus(tmp_path_factory.mktemp("rc"), 3, 1, ("live", "ecoflex", "gelatine"), size=64, seed=4)


def test_loss_weights_validate():
    assert LossWeights() == LossWeights(1.0, 2.0, 10.0)
    with pytest.raises(ValueError):
        LossWeights(adv=-1)
    with pytest.raises(ValueError):
        LossWeights(dp=float("nan"))


def test_embedding_loss_is_half_squared_distance():
    assert float(embedding_loss([1.0, 2.0], [1.0, 0.0])) == 2.0
    batch = float(embedding_loss([[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [1.0, 1.0]]))
    assert batch == 0.25
    with pytest.raises(LossError):
        embedding_loss([1.0], [1.0, 2.0])


def test_identity_loss_counts_flipped_pixels():
    a = np.zeros((4, 4))
    b = a.copy()
    b[0, :3] = 1
    assert float(identity_loss(a, b)) == 1.5
    with pytest.raises(LossError):
        identity_loss(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 3), st.floats(0, 3), st.floats(0, 30))
def test_combination_is_weighted_sum(a, d, i, wa, wd, wi):
    w = LossWeights(wa, wd, wi)
    assert combine_generator_loss(a, d, i, w) == pytest.approx(wa * a + wd * d + wi * i)


def test_renderer_losses_tuple():
    rng = np.random.default_rng(0)
    out = renderer_losses(torch.zeros(2), torch.zeros(2), rng.random((2, 3)), rng.random((2, 3)),
                          np.zeros((2, 1, 4, 4)), np.ones((2, 1, 4, 4)))
    adv, emb, ident, total, disc = (float(x) for x in out)
    assert ident == 8.0
    assert total == pytest.approx(adv + 2 * emb + 10 * ident)
    assert disc == pytest.approx(2 * np.log(2))


def test_style_sites_match_decoder():
    net = RendererNet(ch=4, depth=3, out_size=32)
    s = net.style(torch.randn(3, net.z_dim))
    assert len(s) == 4
    assert s.channels == [32, 16, 8, 4]
    assert all(g.shape == (3, c) for (g, _), c in zip(s.pairs, s.channels))


def test_render_shape_and_determinism():
    p = RendererParams.init(RendererConfig(**TINY))
    b = toy.master_image(32, seed=0)
    z = sample_texture_latent(1)
    a = render_texture(p, b, z)
    assert a.shape == (64, 64)
    assert np.array_equal(a, render_texture(p, b, z))
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert not np.array_equal(a, render_texture(p, b, sample_texture_latent(2)))
    assert len(style_params(p, z)) == 3


def test_render_rejects_bad_inputs():
    p = RendererParams.init(RendererConfig(**TINY))
    with pytest.raises(RenderError):
        render_texture(p, np.ones((16, 16)), sample_texture_latent(0))
    with pytest.raises(RenderError):
        render_texture(p, np.ones((32, 32)), np.zeros(5))
    with pytest.raises(RenderError):
        render_texture(p, np.full((32, 32), np.nan), sample_texture_latent(0))


def test_checkpoint_roundtrip_and_copy(tmp_path):
    p = RendererParams.init(RendererConfig(**TINY))
    back = RendererParams.load(p.save(tmp_path / "r.pt"))
    assert back.id == p.id and back.in_size == 32
    child = p.copy("ecoflex")
    assert child.parent_id == p.id and child.material == "ecoflex"
    assert child.id == p.id  # same weights until trained
    b, z = toy.master_image(32, seed=1), sample_texture_latent(0)
    assert np.array_equal(render_texture(back, b, z), render_texture(p, b, z))


def test_training_errors(corpus):
    cfg = RendererConfig(**TINY)
    with pytest.raises(LineageError):
        train_renderer(corpus, None, "ecoflex", config=cfg)
    with pytest.raises(EmptyMaterialError):
        train_renderer(corpus, RendererParams.init(cfg), "paper", config=cfg)
    with pytest.raises(TrainConfigError):
        train_renderer(corpus, config=RendererConfig(**{**TINY, "out_size": 32}))


def test_finetune_step_count(corpus):
    cfg = RendererConfig(**{**TINY, "finetune_epochs": 2})
    base = train_renderer(corpus, config=cfg)
    ft = train_renderer(corpus, base, "ecoflex", config=cfg)
    # 3 ecoflex images, batch 2, 2 epochs
    assert len(ft.losses) == 3
    assert ft.parent_id == base.id


def test_schedule_lineage(corpus, tmp_path):
    lin = run_schedule(corpus, tmp_path, config=RendererConfig(**TINY))
    assert set(lin) == {"pretrain", "live", "all_spoof", "ecoflex", "gelatine"}
    assert lin["live"]["parent"] == "pretrain"
    assert lin["ecoflex"]["parent"] == "all_spoof"
    assert lin["ecoflex"]["parent_id"] == lin["all_spoof"]["id"]
    assert load_lineage(tmp_path / "lineage.json") == lin
    for name in lin:
        assert (tmp_path / f"{name}_losses.csv").exists()


def test_lineage_cycle(tmp_path):
    p = tmp_path / "l.json"
    p.write_text(json.dumps({"a": {"parent": "b"}, "b": {"parent": "a"}}))
    with pytest.raises(LineageError):
        load_lineage(p)
    p.write_text(json.dumps({"a": {"parent": "zzz"}}))
    with pytest.raises(LineageError):
        load_lineage(p)


def test_embedding_loss_examples():
    assert float(embedding_loss([0.3, -0.2], [0.3, -0.2])) == 0.0
    assert float(embedding_loss([1.0, 0.0], [0.0, 0.0])) == 0.5


def test_default_finetune_is_three_epochs():
    assert RendererConfig().finetune_epochs == 3


def test_texture_latent_changes_style_not_identity(smoke_renderer, smoke_corpus):
    from fpforge.binarize import classical_binarize

    b = toy.master_image(32, seed=77, period=4.0)
    a = render_texture(smoke_renderer, b, sample_texture_latent(1))
    c = render_texture(smoke_renderer, b, sample_texture_latent(2))
    assert np.abs(a - c).mean() > 0
    assert (classical_binarize(a) == classical_binarize(c)).mean() >= 0.8
