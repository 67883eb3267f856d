import json

import numpy as np
import pytest

from fpforge import toy
from fpforge.data import Dataset
from fpforge.errors import MatchError, PairingError, TrainConfigError
from fpforge.match import (CNNEmbedder, EmbedderConfig, ProjectionEmbedder, ScoreSet, contrastive_loss,
                           enumerate_pairs, leakage_check, load_embedder, match_score, read_scores_csv,
                           score_distributions, tar_at_far, train_embedder, write_scores_csv)


def test_match_score_is_cosine():
    assert match_score([1, 0], [0, 2]) == 0.0
    assert match_score([1, 1], [2, 2]) == pytest.approx(1.0)
    assert match_score([1, 0], [-3, 0]) == -1.0
    with pytest.raises(MatchError):
        match_score([1, 0], [1, 0, 0])
    with pytest.raises(MatchError):
        match_score([0, 0], [1, 0])


def test_projection_embedder_unit_and_deterministic(tmp_path):
    img = toy.master_image(64, seed=1)
    a = ProjectionEmbedder(seed=3).embed(img)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    e = load_embedder(ProjectionEmbedder(seed=3).save(tmp_path / "e.json"))
    assert np.array_equal(e.embed(img), a)


def test_cnn_embedder_roundtrip(tmp_path):
    net = CNNEmbedder(dim=16, channels=4, input_size=32)
    img = toy.master_image(48, seed=1)
    back = load_embedder(net.save(tmp_path / "e.pt"))
    assert np.allclose(back.embed(img), net.embed(img))


def test_contrastive_loss_values():
    import torch

    sim = torch.tensor([1.0, 0.5, 0.1])
    same = torch.tensor([True, False, False])
    assert float(contrastive_loss(sim, same, 0.3)) == pytest.approx((0 + 0.04 + 0) / 3)


def test_train_embedder_needs_pairs(tmp_path):
    ds = toy.make_corpus(tmp_path, 2, 1, size=32)
    with pytest.raises(TrainConfigError):
        train_embedder(ds, EmbedderConfig(steps=1))


def test_train_embedder_smoke(live_spoof_corpus):
    net = train_embedder(live_spoof_corpus.filter(is_live=True), EmbedderConfig(steps=5, batch_size=4, channels=4,
                                                                               input_size=32))
    assert net.embed(np.ones((64, 64))).shape == (192,)


def test_pair_counts(live_spoof_corpus):
    g, i = enumerate_pairs(live_spoof_corpus, "live-live")
    # 12 fingers x 2 impressions
    assert len(g) == 12
    assert len(i) == 24 * 23 // 2 - 12
    g, i = enumerate_pairs(live_spoof_corpus, "live-spoof", material="ecoflex")
    assert len(g) == 12 * 2 * 2
    assert len(i) == 24 * 24 - 48


def test_imposter_cap_is_seeded(live_spoof_corpus):
    _, a = enumerate_pairs(live_spoof_corpus, imposter_cap=10, seed=1)
    _, b = enumerate_pairs(live_spoof_corpus, imposter_cap=10, seed=1)
    assert len(a) == 10 and a == b


def test_no_genuine_pairs(tmp_path):
    ds = toy.make_corpus(tmp_path, 3, 1, size=32)
    with pytest.raises(PairingError):
        enumerate_pairs(ds)
    with pytest.raises(PairingError):
        enumerate_pairs(ds, "spoof-spoof")


def test_scores_csv_roundtrip(tmp_path):
    s = {"a": ScoreSet([0.9, 0.8], [0.1, -0.2, 0.3])}
    back = read_scores_csv(write_scores_csv(tmp_path / "s.csv", s))
    assert np.array_equal(back["a"].genuine, s["a"].genuine)
    assert np.array_equal(back["a"].imposter, s["a"].imposter)


def test_tar_at_far_rows():
    rows = tar_at_far(ScoreSet([0.9, 0.7, 0.5], [0.1, 0.6, 0.2, 0.3]), [0.0, 0.25])
    assert rows[0] == (0.0, 0.7, 2 / 3)
    assert rows[1] == (0.25, 0.5, 1.0)
    with pytest.raises(MatchError):
        tar_at_far(ScoreSet([1.0], [0.0]), [])


def test_score_distributions_labels(live_spoof_corpus):
    s = score_distributions(live_spoof_corpus, ProjectionEmbedder(), "live-spoof", material="gelatine")
    assert s.label == "live-gelatine"
    assert s.counts() == {"genuine": 48, "imposter": 24 * 24 - 48}
    assert np.all(np.abs(s.genuine) <= 1.0)


def test_leakage_workers_agree(live_spoof_corpus, tmp_path):
    syn = live_spoof_corpus.filter(material="ecoflex")
    tr = live_spoof_corpus.filter(is_live=True)
    e = ProjectionEmbedder()
    a = leakage_check(syn, tr, e, 0.5, workers=1, shard_size=5)
    b = leakage_check(syn, tr, e, 0.5, workers=3, shard_size=5)
    assert a.to_dict() == b.to_dict()
    assert a.total_comparisons == 24 * 24
    assert json.loads(a.to_json(tmp_path / "l.json").read_text())["threshold"] == 0.5


def test_leakage_empty(tmp_path):
    with pytest.raises(PairingError):
        leakage_check(Dataset(tmp_path, []), Dataset(tmp_path, []), ProjectionEmbedder(), 0.9)


def test_small_pair_counts(tmp_path):
    ds = toy.make_corpus(tmp_path / "a", 2, 2, size=32)
    g, i = enumerate_pairs(ds)
    assert len(g) == 2 and len(i) <= 4
    one = toy.make_corpus(tmp_path / "b", 1, 1, ("live", "ecoflex"), size=32)
    g, _ = enumerate_pairs(one, "live-spoof")
    assert len(g) == 1


def test_tar_small_example():
    assert tar_at_far(ScoreSet([0.9, 0.8], [0.1, 0.2]), [0.5]) == [(0.5, 0.2, 1.0)]


def test_tar_degenerate_ordering():
    (_, _, tar), = tar_at_far(ScoreSet([0.1, 0.2], [0.8, 0.9]), [0.0])
    assert tar == 0.0


def test_tar_is_invariant_to_duplication():
    rng = np.random.default_rng(0)
    g, i = rng.random(30), rng.random(50)
    fars = [0.0, 0.02, 0.1]
    assert tar_at_far(ScoreSet(g, i), fars) == tar_at_far(ScoreSet(np.r_[g, g], np.r_[i, i]), fars)


def test_leakage_null_model(tmp_path):
    from fpforge.data import ImpressionRecord, write_image, write_manifest

    rng = np.random.default_rng(0)

    def noise_set(root, n, prov):
        recs = []
        for k in range(n):
            write_image(root / f"n{k}.png", rng.random((64, 64)))
            recs.append(ImpressionRecord(f"{root.name}{k}", 0, "live", True, "train", f"n{k}.png", 64, 64))
        write_manifest(root / "manifest.csv", recs)
        return Dataset(root, recs, provenance=prov)

    syn, train = noise_set(tmp_path / "s", 3, "synthetic"), noise_set(tmp_path / "t", 4, "real")
    rep = leakage_check(syn, train, ProjectionEmbedder(), threshold=0.99)
    assert rep.flagged_fingers == 0 and rep.pairs == []
    assert rep.total_comparisons == 12


def test_contrastive_training_separates_fingers(live_spoof_corpus):
    live = live_spoof_corpus.filter(is_live=True)
    net = train_embedder(live, EmbedderConfig(steps=150, batch_size=8, channels=8, input_size=32))
    s = score_distributions(live, net)
    assert s.genuine.mean() > s.imposter.mean()
