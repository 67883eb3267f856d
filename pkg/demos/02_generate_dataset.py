# %% [markdown]
# # From a live corpus to a synthetic live/spoof dataset
#
# The generator is a chain of independently trained stages:
#
# 1. a GAN that draws master prints (binary ridge maps),
# 2. the warper from `01_impressions.py`,
# 3. a texture renderer per material, pretrained on live captures and then
#    branched into live and spoof styles.
#
# Everything here is desk scale: 32 px masters rendered at 64 px on a toy
# corpus, a few minutes on one CPU core.  Real use swaps in a captured
# corpus and the full-size defaults.  Outputs land in `demos/out/generate/`.

# %%
import json
import time
from pathlib import Path

from fpforge import toy
from fpforge.masterprint import GanConfig, train_masterprint_gan
from fpforge.pipeline import EvalConfig, GenerationConfig, generate_dataset, replicate_eval_protocol
from fpforge.render import RendererConfig, train_renderer

out = Path(__file__).resolve().parent / "out" / "generate"
ckpt = out / "checkpoints"
ckpt.mkdir(parents=True, exist_ok=True)

# %% [markdown]
# ## A stand-in corpus
# 32 toy fingers, two impressions each, captured live and as two spoof
# materials.  The manifest format is the same one a real corpus uses.

# %%
corpus = toy.make_corpus(out / "corpus", 32, 2, ("live", "ecoflex", "gelatine"), size=64, seed=0, period=8.0)
print(len(corpus), "images,", corpus.materials)

# %% [markdown]
# ## Master prints
# Live captures are binarized and resized to 32 px; the GAN learns that
# distribution.  Watch `loss_D`: it drops fast while the generator still
# draws noise, then climbs back as the samples get plausible.

# %%
t0 = time.time()
gan = train_masterprint_gan(corpus.filter(is_live=True),
                            GanConfig(steps=500, n_up=3, batch_size=8, ch=8, log_every=0))
for step in (1, 100, 250, 500):
    print(f"step {step:4d}  loss_G {gan.losses[step - 1][1]:.3f}  loss_D {gan.losses[step - 1][2]:.3f}")
gan.save(ckpt / "gan.pt")
print(f"{time.time() - t0:.0f}s")

# %% [markdown]
# ## Renderers
# Pretrain on the live captures, then branch.  Spoof materials fine-tune
# from the all-spoof model, so each material checkpoint records its parent.

# %%
rc = RendererConfig(steps=300, ch=8, depth=3, d_ch=4, in_size=32, out_size=64, batch_size=4, log_every=0)
t0 = time.time()
pre = train_renderer(corpus, material="pretrain", config=rc)
live = train_renderer(corpus, pre, "live", config=rc)
spoof = train_renderer(corpus, pre, "all_spoof", config=rc)
eco = train_renderer(corpus, spoof, "ecoflex", config=rc)
live.save(ckpt / "live.pt")
eco.save(ckpt / "ecoflex.pt")
print("ecoflex parent", eco.parent_id, "== all_spoof", spoof.id)
print("identity loss first/last", round(pre.losses[0][3], 1), round(pre.losses[-1][3], 1))
print(f"{time.time() - t0:.0f}s")

# %% [markdown]
# ## Generation
# Each impression's warped binary is stored once under `binaries/` and both
# materials are rendered from it.  Every random draw comes from a seed
# derived from (root seed, finger, impression, purpose), so adding fingers
# later leaves existing files untouched.

# %%
syn = generate_dataset(GenerationConfig(
    n_fingers=6, impressions_per_finger=3, materials=["live", "ecoflex"], output_root=str(out / "synthetic"),
    masterprint=str(ckpt / "gan.pt"), renderers={"live": str(ckpt / "live.pt"), "ecoflex": str(ckpt / "ecoflex.pt")},
    root_seed=2024))
print(len(syn), "synthetic images")

# %% [markdown]
# ## Evaluation bundle
# Statistics, genuine/imposter scores with TAR at fixed FAR, and the
# identity-leakage audit against the training corpus.  A failing step is
# marked in `summary.json` and does not stop the others.

# %%
summary = replicate_eval_protocol(EvalConfig(str(out / "synthetic"), str(out / "corpus"), str(out / "report")))
print(json.dumps({k: v["status"] for k, v in summary["steps"].items()}, indent=1))
print((out / "report" / "fp_stats.csv").read_text())
