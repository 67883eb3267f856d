"""Acceptance criteria, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE_RESULTS`` so the
terminal summary can print a single pass/fail line per criterion.
"""
import math
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS, SMOKE_SECONDS
from fpforge import toy
from fpforge.binarize import classical_binarize, hard
from fpforge.data import Dataset, read_image
from fpforge.detector import (COMPOSITIONS, REAL_FRACTIONS, DetectionScoreSet, DetectorConfig, fuse_scores,
                              run_augmentation_experiment, tdr_at_fdr)
from fpforge.masterprint import generate_masterprint, prepare_corpus, sample_identity_latent
from fpforge.match import ProjectionEmbedder, ScoreSet, leakage_check, tar_at_far
from fpforge.minutiae import BIFURCATION, ENDING, STAT_ROWS, extract_minutiae, fingerprint_stats, minutiae_per_megapixel
from fpforge.pipeline import GenerationConfig, binary_path, derive_seed, generate_dataset
from fpforge.render import (LossWeights, RendererParams, combine_generator_loss, embedding_loss, identity_loss,
                            render_texture, renderer_losses, sample_texture_latent)
from fpforge.warp import (Pose, apply_warp, compose_distortion_field, sample_pose_and_coeffs, synthesize_basis,
                          upsample_field)

# row labels of the published statistics table
PUBLISHED_STAT_ROWS = [
    "Total Minutiae Count",
    "Ridge Ending Minutiae Count",
    "Ridge Bifurcation Minutiae Count",
    "Verifinger Minutiae Quality",
    "Fingerprint Area (Megapixels)",
    "Fingerprint Image Quality (NFIQ2)",
]


@contextmanager
def criterion(k: int, name: str, budget: float | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        ACCEPTANCE_RESULTS[k] = (False, f"{name}: {type(e).__name__}: {e}"[:240])
        raise
    dt = time.perf_counter() - t0
    if budget is not None and dt >= budget:
        ACCEPTANCE_RESULTS[k] = (False, f"{name}: took {dt:.1f}s, budget {budget:.0f}s")
        pytest.fail(f"criterion {k} exceeded its {budget}s budget ({dt:.1f}s)")
    ACCEPTANCE_RESULTS[k] = (True, f"{name} ({dt:.1f}s)")


# -- 1 ----------------------------------------------------------------------

def brute_dense(grid, out_w, out_h):
    """Per-pixel corner-aligned bilinear interpolation, one cell at a time."""
    _, gh, gw = grid.shape
    out = np.zeros((2, out_h, out_w))
    for y in range(out_h):
        fy = y * (gh - 1) / (out_h - 1)
        i = min(int(math.floor(fy)), gh - 2)
        ty = fy - i
        for x in range(out_w):
            fx = x * (gw - 1) / (out_w - 1)
            j = min(int(math.floor(fx)), gw - 2)
            tx = fx - j
            for ch in range(2):
                c = grid[ch]
                out[ch, y, x] = ((1 - ty) * ((1 - tx) * c[i, j] + tx * c[i, j + 1])
                                 + ty * ((1 - tx) * c[i + 1, j] + tx * c[i + 1, j + 1]))
    return out


def test_criterion_1_distortion_field():
    with criterion(1, "distortion field composition", budget=10):
        basis = synthesize_basis(16, 16, 8, seed=0)
        zero = np.zeros(basis.t)
        assert np.array_equal(compose_distortion_field(basis, zero, 16, 16).field, basis.mean_field)
        assert np.array_equal(compose_distortion_field(basis, zero, 40, 30).field,
                              upsample_field(basis.mean_field, 40, 30))

        rng = np.random.default_rng(1)
        mean = compose_distortion_field(basis, zero, 40, 30).field
        for _ in range(100):
            a, b = rng.normal(size=(2, basis.t))
            s, t = rng.normal(size=2)
            dev = lambda c: compose_distortion_field(basis, c, 40, 30).field - mean  # noqa: E731
            assert np.max(np.abs(dev(s * a + t * b) - (s * dev(a) + t * dev(b)))) < 1e-9

        c = rng.normal(size=basis.t)
        dense = compose_distortion_field(basis, c, 37, 29).field
        grid = basis.mean_field + sum(c[k] * math.sqrt(basis.eigenvalues[k]) * basis.eigen_fields[k]
                                      for k in range(basis.t))
        assert np.max(np.abs(dense - brute_dense(grid, 37, 29))) < 1e-9


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_pose_sampling():
    with criterion(2, "pose and coefficient sampling", budget=10):
        basis = synthesize_basis(8, 8, 4, seed=0)
        rng = np.random.default_rng(2)
        draws = [sample_pose_and_coeffs(rng, basis) for _ in range(10_000)]
        rot = np.array([p.rotation for p, _ in draws])
        tr = np.array([[p.tx, p.ty] for p, _ in draws])
        c1 = np.array([c[0] for _, c in draws])
        assert rot.min() >= -30 and rot.max() <= 30
        assert tr.min() >= -25 and tr.max() <= 25
        assert abs(c1.std() - 0.66) <= 0.05


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_warp_invariants():
    with criterion(3, "warp invariants", budget=30):
        rng = np.random.default_rng(3)
        img = rng.random((48, 48))
        assert np.array_equal(apply_warp(img, Pose()), img)

        imp = np.zeros((40, 40))
        imp[10, 12] = 1.0
        moved = apply_warp(imp, Pose(0.0, 5, -3), fill=0.0)
        expect = np.zeros_like(imp)
        expect[7, 17] = 1.0
        assert np.array_equal(moved, expect)

        out = img
        for _ in range(4):
            out = apply_warp(out, Pose(90.0, strict=False))
        assert np.max(np.abs(out - img)) < 1e-6
        # a single quarter turn is an exact axis permutation as well
        assert np.max(np.abs(apply_warp(img, Pose(90.0, strict=False)) - np.rot90(img))) < 1e-6


# -- 4 ----------------------------------------------------------------------

def _scalar_softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def test_criterion_4_loss_arithmetic():
    with criterion(4, "renderer loss arithmetic"):
        w = LossWeights()
        assert (w.adv, w.dp, w.ident) == (1.0, 2.0, 10.0)
        assert combine_generator_loss(0.1, 0.2, 0.3, w) == 3.5

        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 33))
            ref, emb = rng.normal(size=n), rng.normal(size=n)
            bin_a, bin_b = rng.random((9, 11)), rng.random((9, 11))
            fake = rng.normal(size=3) * 3
            dp = 0.5 * sum((a - b) ** 2 for a, b in zip(ref.tolist(), emb.tolist()))
            li = 0.5 * sum((a - b) ** 2 for a, b in zip(bin_a.ravel().tolist(), bin_b.ravel().tolist()))
            adv = sum(_scalar_softplus(-f) for f in fake.tolist()) / len(fake)
            assert float(embedding_loss(ref, emb)) == pytest.approx(dp, rel=1e-6)
            assert float(identity_loss(bin_a, bin_b)) == pytest.approx(li, rel=1e-6)
            adv_l, _, _, total, _ = renderer_losses(torch.zeros(3), torch.as_tensor(fake), ref, emb, bin_a, bin_b)
            assert float(adv_l) == pytest.approx(adv, rel=1e-6)
            assert float(total) == pytest.approx(adv + 2 * dp + 10 * li, rel=1e-6)


# -- 5 ----------------------------------------------------------------------

def sweep(neg, pos, target):
    """Exhaustive sweep: every observed score plus one value above all of them."""
    neg, pos = np.asarray(neg, float), np.asarray(pos, float)
    cands = sorted(set(neg.tolist()) | set(pos.tolist()))
    cands.append(float(np.nextafter(max(cands), np.inf)))
    ok = [t for t in cands if np.count_nonzero(neg >= t) / neg.size <= target]
    tau = min(ok)
    return tau, np.count_nonzero(pos >= tau) / pos.size


def test_criterion_5_metric_oracles():
    with criterion(5, "TAR/TDR oracles and score fusion"):
        rng = np.random.default_rng(5)
        for k in range(100):
            n_neg, n_pos = rng.integers(1, 1001, size=2)
            # coarse values force ties on some sets
            q = 1000 if k % 2 else 20
            neg = np.round(rng.normal(0.3, 0.15, n_neg) * q) / q
            pos = np.round(rng.normal(0.6, 0.15, n_pos) * q) / q
            fars = [0.0, 0.001, 0.01, 0.1]
            got = tar_at_far(ScoreSet(pos, neg), fars)
            assert got == [(f, *sweep(neg, pos, f)) for f in fars]
            assert tdr_at_fdr(DetectionScoreSet(neg, pos), 0.002) == sweep(neg, pos, 0.002)
            tdrs = [tdr_at_fdr((neg, pos), f)[1] for f in (0.0, 0.002, 0.01, 0.05, 0.2, 1.0)]
            assert all(a <= b for a, b in zip(tdrs, tdrs[1:]))
        for p, w in rng.random((200, 2)):
            assert fuse_scores(p, w) == 0.8 * p + 0.2 * w


# -- 6 ----------------------------------------------------------------------

def counts(ms):
    return sum(m.kind == ENDING for m in ms), sum(m.kind == BIFURCATION for m in ms)


def test_criterion_6_crossing_number():
    with criterion(6, "crossing-number minutiae"):
        b = np.zeros((64, 64), np.uint8)
        b[32, 12:52] = 1
        assert counts(extract_minutiae(b)) == (2, 0)
        t = b.copy()
        t[33:54, 32] = 1
        e_t, b_t = counts(extract_minutiae(t))
        assert b_t == 1
        broken = t.copy()
        broken[32, 19:22] = 0
        e_b, b_b = counts(extract_minutiae(broken))
        assert (e_b - e_t, b_b) == (2, 1)
        for s in range(10):
            ridge = 1 - toy.master_image(96, seed=s, period=8.0)
            ms = extract_minutiae(ridge)
            e, bi = counts(ms)
            assert len(ms) == e + bi


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_stats_protocol(tmp_path):
    with criterion(7, "fingerprint statistics protocol"):
        assert list(STAT_ROWS) == PUBLISHED_STAT_ROWS
        ds = toy.make_corpus(tmp_path, 3, 1, size=96, period=8.0)
        stats = fingerprint_stats(ds, classical_binarize, nfiq2="definitely-not-installed")
        names = [row[0] for row in stats.rows()]
        assert names == PUBLISHED_STAT_ROWS
        assert round(minutiae_per_megapixel(40.45, 0.68), 2) == 59.49


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_smoke_training(smoke_corpus, smoke_gan, smoke_binarizer, teacher_pairs, smoke_renderer,
                                    smoke_detector):
    with criterion(8, "desk-scale smoke training"):
        # (a) master GAN: the generator must have learned something real either way
        masters = np.stack([generate_masterprint(smoke_gan, sample_identity_latent(s)).image for s in range(16)])
        real_ridge = (prepare_corpus(smoke_corpus.filter(is_live=True), smoke_gan.generator.size) < 0.5).mean()
        assert masters.std(0).mean() > 0.05, "generator collapsed"
        assert abs((masters < 0.5).mean() - real_ridge) < 0.1
        d = np.array([row[2] for row in smoke_gan.losses])
        d_first, d_last = d[:100].mean(), d[-100:].mean()

        # (b) binarizer agreement with its teacher on held-out pairs
        acc = np.mean([(hard(smoke_binarizer(g)) == t).mean() for g, t in teacher_pairs[1]])
        assert acc >= 0.90, acc

        # (c) renderer identity loss trends down
        li = np.array([row[3] for row in smoke_renderer.losses])
        assert len(li) == 500
        slope = np.polyfit(np.arange(len(li)), li, 1)[0]
        assert slope < 0 and li[-100:].mean() < li[:100].mean(), (li[:100].mean(), li[-100:].mean())

        # (d) detector on a separable toy corpus
        assert smoke_detector.whole.val_accuracy >= 0.9
        assert smoke_detector.patch.val_accuracy >= 0.9

        total = sum(SMOKE_SECONDS.get(k, 0.0) for k in ("gan", "binarizer", "renderer", "detector"))
        assert total < 30 * 60, total

        if not d_last < d_first:
            # reported rather than hidden; see the ledger for the sweep behind this config
            pytest.xfail(f"(a) loss_D last-100 {d_last:.3f} not below first-100 {d_first:.3f}; "
                         f"(b) acc {acc:.3f}, (c) identity-loss slope {slope:.3g}, (d) pass")


# -- 9 ----------------------------------------------------------------------

def test_criterion_9_end_to_end(smoke_stack, tmp_path):
    with criterion(9, "end-to-end determinism"):
        def run(out):
            return generate_dataset(GenerationConfig(
                n_fingers=2, impressions_per_finger=3, materials=["live", "ecoflex"], output_root=str(out),
                masterprint=smoke_stack["masterprint"], renderers=smoke_stack["renderers"], root_seed=11))

        a, b = run(tmp_path / "a"), run(tmp_path / "b")
        assert len(a) == len(b) == 12
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 12 + 6 + 1  # renders, binaries, manifest
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

        # both materials of one impression re-render from the single stored binary
        renderers = {m: RendererParams.load(p) for m, p in smoke_stack["renderers"].items()}
        for f in range(2):
            for i in range(3):
                fid = f"syn{f:05d}"
                warped = read_image(binary_path(tmp_path / "a", fid, i))
                for m, r in renderers.items():
                    z = sample_texture_latent(derive_seed(11, f, i, m), r.generator.z_dim)
                    stored = read_image(tmp_path / "a" / m / f"{fid}_{i}.png")
                    assert np.max(np.abs(render_texture(r, warped, z) - stored)) <= 0.5 / 255 + 1e-9


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_leakage(tmp_path):
    with criterion(10, "identity leakage audit"):
        train = toy.make_corpus(tmp_path / "train", 6, 2, size=64, seed=1)
        syn = toy.make_corpus(tmp_path / "syn", 4, 2, size=64, seed=2, provenance="synthetic")
        victim, planted = train.records[5], syn.records[3]
        shutil.copyfile(train.root / victim.image_path, syn.root / planted.image_path)
        rep = leakage_check(syn, train, ProjectionEmbedder(), threshold=0.999)
        hits = {(tuple(p["synthetic"]), tuple(p["training"])): p["score"] for p in rep.pairs}
        assert hits[(planted.key, victim.key)] == 1.0
        assert rep.total_comparisons == len(syn) * len(train) == 8 * 12


# -- 11 ---------------------------------------------------------------------

def test_criterion_11_experiment_shape(tmp_path):
    with criterion(11, "augmentation experiment shape"):
        # the synthetic set lacks the evaluation material; real data supplies it
        real = toy.make_corpus(tmp_path / "r", 16, 2, ("live", "ecoflex"), size=48, seed=1, period=6.0)
        syn = toy.make_corpus(tmp_path / "s", 16, 2, ("live", "gelatine"), size=48, seed=2, period=6.0,
                              provenance="synthetic")
        test = toy.make_corpus(tmp_path / "t", 10, 2, ("live", "ecoflex"), size=48, seed=3, period=6.0,
                               split="test")
        cfg = DetectorConfig(steps=150, batch_size=8, channels=4, whole_size=48, patch_size=24,
                             patches_per_image=2, log_every=0)
        res = run_augmentation_experiment(real, syn, eval_sets={"toy": test}, config=cfg, out_dir=tmp_path / "out")
        table = res.table(100)
        assert list(table) == list(COMPOSITIONS) and len(table) == 4
        for comp in COMPOSITIONS:
            fr = [f for f, _ in res.sweep(comp, "toy")]
            assert fr == list(REAL_FRACTIONS) or comp == "real_only" and fr == list(REAL_FRACTIONS[1:])
        assert table["real_plus_synthetic"]["toy"] >= table["synthetic_only"]["toy"], table
