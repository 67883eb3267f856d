import os
import time

import numpy as np
import pytest
import torch

from fpforge import toy
from fpforge.warp import synthesize_basis

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}
SMOKE_SECONDS: dict[str, float] = {}


def _timed(name, fn):
    t0 = time.perf_counter()
    out = fn()
    SMOKE_SECONDS[name] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def toy_basis():
    return synthesize_basis(8, 8, 4, seed=3, rms_px=0.5)


@pytest.fixture(scope="session")
def live_spoof_corpus(tmp_path_factory, toy_basis):
    """12 fingers x 2 impressions, live + two spoof materials, 64 px."""
    root = tmp_path_factory.mktemp("corpus")
    return toy.make_corpus(root, 12, 2, ("live", "ecoflex", "gelatine"), size=64, seed=1,
                           basis=toy_basis, period=6.0)


@pytest.fixture(scope="session")
def tiny_stack(tmp_path_factory):
    """Untrained 32 px master-print GAN and two renderers (32 -> 64 px)."""
    from fpforge.masterprint import GanConfig, GanParams
    from fpforge.render import RendererConfig, RendererParams

    root = tmp_path_factory.mktemp("stack")
    GanParams.init(GanConfig(n_up=3, ch=4)).save(root / "gan.pt")
    base = RendererParams.init(RendererConfig(ch=4, depth=2, d_ch=2, in_size=32, out_size=64))
    paths = {}
    for k, m in enumerate(("live", "ecoflex")):
        r = base.copy(m)
        with torch.no_grad():
            r.generator.head.bias.add_(0.1 * k)
        paths[m] = str(r.save(root / f"{m}.pt"))
    return {"masterprint": str(root / "gan.pt"), "renderers": paths}


# -- desk-scale smoke training, shared by the acceptance and module tests ----------

@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    """32 fingers x 2 impressions: 64 live captures plus two spoof materials, 64 px."""
    root = tmp_path_factory.mktemp("smoke")
    basis = synthesize_basis(8, 8, 4, seed=0, rms_px=0.5)
    return _timed("corpus", lambda: toy.make_corpus(root, 32, 2, ("live", "ecoflex", "gelatine"), size=64,
                                                    seed=0, basis=basis, period=8.0))


@pytest.fixture(scope="session")
def smoke_gan(smoke_corpus):
    from fpforge.masterprint import GanConfig, train_masterprint_gan

    cfg = GanConfig(steps=1000, n_up=3, batch_size=8, ch=8, beta1=0.5, anneal_noise=True, seed=0, log_every=0)
    return _timed("gan", lambda: train_masterprint_gan(smoke_corpus.filter(is_live=True), cfg))


@pytest.fixture(scope="session")
def teacher_pairs():
    """220 toy (gray, classical ridge map) pairs: 200 for training, 20 held out."""
    from fpforge.binarize import classical_binarize

    pairs = []
    for s in range(220):
        g = toy.render_toy(toy.master_image(64, seed=1000 + s, period=6.0), "live", np.random.default_rng(s))
        pairs.append((g, classical_binarize(g)))
    return pairs[:200], pairs[200:]


@pytest.fixture(scope="session")
def smoke_binarizer(teacher_pairs):
    from fpforge.binarize import BinarizerConfig, train_binarizer

    cfg = BinarizerConfig(steps=2000, batch_size=8, channels=8, crop=32, seed=0, log_every=0)
    return _timed("binarizer", lambda: train_binarizer(teacher_pairs[0], cfg))


SMOKE_RENDER = dict(ch=8, depth=3, d_ch=4, in_size=32, out_size=64, batch_size=4, seed=0, log_every=0)


@pytest.fixture(scope="session")
def smoke_renderer(smoke_corpus):
    from fpforge.render import RendererConfig, train_renderer

    cfg = RendererConfig(steps=500, **SMOKE_RENDER)
    return _timed("renderer", lambda: train_renderer(smoke_corpus, material="pretrain", config=cfg))


@pytest.fixture(scope="session")
def smoke_stack(smoke_corpus, smoke_gan, smoke_renderer, tmp_path_factory):
    """Trained GAN plus live and ecoflex renderers branched from the smoke renderer."""
    from fpforge.render import RendererConfig, train_renderer

    root = tmp_path_factory.mktemp("smoke_stack")
    cfg = RendererConfig(steps=100, **SMOKE_RENDER)

    def build():
        live = train_renderer(smoke_corpus, smoke_renderer, "live", config=cfg)
        spoof = train_renderer(smoke_corpus, smoke_renderer, "all_spoof", config=cfg)
        eco = train_renderer(smoke_corpus, spoof, "ecoflex", config=cfg)
        return {"masterprint": str(smoke_gan.save(root / "gan.pt")),
                "renderers": {"live": str(live.save(root / "live.pt")), "ecoflex": str(eco.save(root / "eco.pt"))}}

    return _timed("renderer_branches", build)


@pytest.fixture(scope="session")
def detector_corpus(tmp_path_factory):
    """100 live and 100 spoof toy captures (50 fingers x 2 impressions)."""
    root = tmp_path_factory.mktemp("det")
    return toy.make_corpus(root, 50, 2, ("live", "ecoflex"), size=64, seed=5, period=6.0)


@pytest.fixture(scope="session")
def smoke_detector(detector_corpus):
    from fpforge.detector import DetectorConfig, train_two_branch

    cfg = DetectorConfig(steps=500, batch_size=16, channels=8, whole_size=64, patch_size=32, seed=0, log_every=0)
    return _timed("detector", lambda: train_two_branch(detector_corpus, cfg))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    if SMOKE_SECONDS:
        terminalreporter.write_line("smoke training seconds: " + ", ".join(f"{k} {v:.0f}" for k, v in SMOKE_SECONDS.items()))
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, name = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}")


os.environ.setdefault("OMP_NUM_THREADS", "1")
