"""Texture rendering: warped binary impression + texture latent -> grayscale capture.

The generator is an encoder-decoder with skip connections.  A small MLP maps
the texture latent to a scale/shift pair for every instance-normalization
site of the decoder (the encoder is not modulated).  Binary inputs are in
image polarity (ridges 0) and are resized to the output resolution at the
stem, so a 256 px master can drive a 512 px render.

Training follows a three-tier schedule: pretrain on live captures, branch
into a live and an all-spoof model, then fine-tune the all-spoof model for a
few epochs per spoof material.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .binarize import BinarizerParams, binarize, classical_binarize, hard, soft_classical_binarize
from .data import Dataset
from .errors import EmptyMaterialError, LineageError, LossError, RenderError, TrainConfigError
from .masterprint import Discriminator, discriminator_loss, generator_loss
from .match import ProjectionEmbedder
from .nn import load_checkpoint, load_state, params_digest, resize, save_checkpoint, seed_everything, write_loss_log

logger = logging.getLogger(__name__)

TEXTURE_DIM = 128
SCOPES = ("pretrain", "live", "all_spoof")
FINETUNE_EPOCHS = 3
LOSS_COLUMNS = ["step", "adversarial", "embedding", "identity"]


def sample_texture_latent(seed: int, dim: int = TEXTURE_DIM) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(dim)


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    dp: float = 2.0
    ident: float = 10.0

    def __post_init__(self):
        for v in (self.adv, self.dp, self.ident):
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError("loss weights must be non-negative and finite")


@dataclass
class StyleParams:
    """One ``(gamma, beta)`` pair per decoder normalization site, each ``(N, C)``."""

    pairs: list

    def __len__(self):
        return len(self.pairs)

    @property
    def channels(self) -> list[int]:
        return [g.shape[1] for g, _ in self.pairs]


# -- networks ---------------------------------------------------------------

class StyleMLP(nn.Module):
    """Depth-2 MLP from the texture latent to all decoder scale/shift vectors."""

    def __init__(self, z_dim: int, site_channels: list[int], hidden: int = 256):
        super().__init__()
        self.site_channels = list(site_channels)
        self.net = nn.Sequential(nn.Linear(z_dim, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, 2 * sum(site_channels)))

    def forward(self, z) -> StyleParams:
        out = self.net(z)
        pairs, k = [], 0
        for c in self.site_channels:
            pairs.append((out[:, k:k + c], out[:, k + c:k + 2 * c]))
            k += 2 * c
        return StyleParams(pairs)


class AdaIN(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)

    def forward(self, x, gamma, beta):
        return self.norm(x) * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class RendererNet(nn.Module):
    """U-shaped encoder-decoder with style-modulated decoder."""

    def __init__(self, ch: int = 16, depth: int = 3, out_size: int = 512, z_dim: int = TEXTURE_DIM):
        super().__init__()
        self.ch, self.depth, self.out_size, self.z_dim = ch, depth, out_size, z_dim
        chs = [min(ch * 2**i, ch * 8) for i in range(depth + 1)]
        self.stem = nn.Sequential(nn.Conv2d(1, chs[0], 3, padding=1), nn.InstanceNorm2d(chs[0], affine=True),
                                  nn.ReLU(inplace=True))
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chs[i], chs[i + 1], 4, stride=2, padding=1),
                          nn.InstanceNorm2d(chs[i + 1], affine=True), nn.ReLU(inplace=True))
            for i in range(depth))
        self.bottleneck = nn.Conv2d(chs[-1], chs[-1], 3, padding=1)
        self.up_conv = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        sites = [chs[-1]]
        self.bottleneck_norm = AdaIN(chs[-1])
        for i in reversed(range(depth)):
            self.up_conv.append(nn.Conv2d(chs[i + 1] + chs[i], chs[i], 3, padding=1))
            self.up_norm.append(AdaIN(chs[i]))
            sites.append(chs[i])
        self.site_channels = sites
        self.style = StyleMLP(z_dim, sites)
        self.head = nn.Conv2d(chs[0], 1, 3, padding=1)

    def forward(self, binary, z):
        x = resize(binary, self.out_size) * 2.0 - 1.0
        style = self.style(z)
        h = self.stem(x)
        skips = []
        for down in self.down:
            skips.append(h)
            h = down(h)
        g, b = style.pairs[0]
        h = F.relu(self.bottleneck_norm(self.bottleneck(h), g, b))
        for j, (conv, norm) in enumerate(zip(self.up_conv, self.up_norm)):
            skip = skips[-1 - j]
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            g, b = style.pairs[j + 1]
            h = F.relu(norm(conv(torch.cat([h, skip], dim=1)), g, b))
        return torch.sigmoid(self.head(h))


def _disc_levels(size: int) -> int:
    return max(1, int(math.log2(size)) - 2)


# -- losses -----------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def embedding_loss(ref, emb) -> torch.Tensor:
    """Half squared distance between embeddings; rows are averaged for batches."""
    ref, emb = _as_tensor(ref), _as_tensor(emb)
    if ref.shape != emb.shape:
        raise LossError(f"embedding shapes differ: {tuple(ref.shape)} vs {tuple(emb.shape)}")
    sq = (ref - emb) ** 2
    per = 0.5 * sq.reshape(ref.shape[0], -1).sum(1) if ref.ndim > 1 else 0.5 * sq.sum()
    return per.mean()


def identity_loss(binary, binary_hat) -> torch.Tensor:
    """Half summed squared pixel difference between two binaries of the same polarity."""
    a, b = _as_tensor(binary), _as_tensor(binary_hat)
    if a.shape != b.shape:
        raise LossError(f"binary shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 4:
        return (0.5 * ((a - b) ** 2).sum(dim=(1, 2, 3))).mean()
    return 0.5 * ((a - b) ** 2).sum()


def combine_generator_loss(adv, emb, ident, weights: LossWeights = LossWeights()):
    return weights.adv * adv + weights.dp * emb + weights.ident * ident


def renderer_losses(d_real, d_fake, emb_real, emb_fake, binary, binary_hat, weights: LossWeights = LossWeights()):
    """All renderer loss terms.

    Parameters
    ----------
    d_real, d_fake : discriminator logits on real captures and renders.
    emb_real, emb_fake : embeddings of the real capture and of the render.
    binary, binary_hat : ground-truth binary and binarized render, same polarity.

    Returns
    -------
    (adversarial, embedding, identity, generator_total, discriminator)
        ``adversarial`` is the generator side of the game and
        ``discriminator`` the other side of the same objective.
    """
    emb = embedding_loss(emb_real, emb_fake)
    ident = identity_loss(binary, binary_hat)
    adv = generator_loss(d_fake)
    disc = discriminator_loss(d_real, d_fake)
    return adv, emb, ident, combine_generator_loss(adv, emb, ident, weights), disc


# -- params -----------------------------------------------------------------

@dataclass
class RendererConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    ch: int = 16
    depth: int = 3
    d_ch: int = 8
    in_size: int = 256
    out_size: int = 512
    z_dim: int = TEXTURE_DIM
    weights: LossWeights = field(default_factory=LossWeights)
    finetune_epochs: float = FINETUNE_EPOCHS
    seed: int = 0
    log_every: int = 100
    loss_log: str | None = None


@dataclass
class RendererParams:
    generator: RendererNet
    discriminator: Discriminator
    material: str = "pretrain"
    parent_id: str | None = None
    in_size: int = 256
    losses: list = field(default_factory=list)  # (step, adversarial, embedding, identity)
    d_losses: list = field(default_factory=list)

    @property
    def id(self) -> str:
        return params_digest(self.generator, self.discriminator)[:16]

    @property
    def arch(self) -> dict:
        g = self.generator
        return {"ch": g.ch, "depth": g.depth, "out_size": g.out_size, "z_dim": g.z_dim,
                "in_size": self.in_size, "d_ch": self.discriminator_ch}

    @property
    def discriminator_ch(self) -> int:
        return self.discriminator.ch

    def save(self, path):
        return save_checkpoint(path, "renderer", self.arch, {"G": self.generator, "D": self.discriminator},
                               {"material": self.material, "parent_id": self.parent_id, "id": self.id})

    @classmethod
    def load(cls, path) -> "RendererParams":
        ck = load_checkpoint(path, "renderer")
        a = ck["arch"]
        g = RendererNet(a["ch"], a["depth"], a["out_size"], a["z_dim"])
        d = Discriminator(a["d_ch"], _disc_levels(a["out_size"]))
        load_state(g, ck["state"]["G"])
        load_state(d, ck["state"]["D"])
        g.eval()
        d.eval()
        return cls(g, d, ck["extra"]["material"], ck["extra"]["parent_id"], a["in_size"])

    @classmethod
    def init(cls, config: RendererConfig) -> "RendererParams":
        seed_everything(config.seed)
        g = RendererNet(config.ch, config.depth, config.out_size, config.z_dim)
        d = Discriminator(config.d_ch, _disc_levels(config.out_size))
        g.eval()
        return cls(g, d, "pretrain", None, config.in_size)

    def copy(self, material: str) -> "RendererParams":
        """Fresh child initialized from these weights, recording this model as parent."""
        g = RendererNet(self.generator.ch, self.generator.depth, self.generator.out_size, self.generator.z_dim)
        d = Discriminator(self.discriminator_ch, _disc_levels(self.generator.out_size))
        g.load_state_dict(self.generator.state_dict())
        d.load_state_dict(self.discriminator.state_dict())
        return RendererParams(g, d, material, self.id, self.in_size)


def style_params(params: RendererParams, z) -> StyleParams:
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        return params.generator.style(z)


def render_texture(params: RendererParams, binary, z) -> np.ndarray:
    """Grayscale render in [0, 1] at the generator's output size."""
    binary = np.asarray(binary, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    if binary.shape != (params.in_size, params.in_size):
        raise RenderError(f"binary input must be {params.in_size}x{params.in_size}, got {binary.shape}")
    if z.shape != (params.generator.z_dim,):
        raise RenderError(f"texture latent must have length {params.generator.z_dim}, got {z.shape}")
    if not (np.all(np.isfinite(binary)) and np.all(np.isfinite(z))):
        raise RenderError("inputs must be finite")
    g = params.generator
    g.eval()
    with torch.no_grad():
        out = g(torch.from_numpy(np.clip(binary, 0.0, 1.0))[None, None], torch.from_numpy(z)[None])
    return np.clip(out[0, 0].double().numpy(), 0.0, 1.0)


# -- training ---------------------------------------------------------------

def scope_records(dataset: Dataset, material: str) -> Dataset:
    if material in ("pretrain", "live"):
        return dataset.filter(is_live=True)
    if material == "all_spoof":
        return dataset.filter(is_live=False)
    return dataset.filter(material=material)


def _ground_truth(gray: np.ndarray, binarizer) -> np.ndarray:
    """Image-polarity binary of a capture, from the frozen binarizer or the classical teacher."""
    ridge = hard(binarizer(gray)) if binarizer is not None else classical_binarize(gray)
    return 1.0 - ridge.astype(np.float32)


def _frozen(module):
    if isinstance(module, nn.Module):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    return module


def train_renderer(dataset: Dataset, init: RendererParams | None = None, material: str = "pretrain",
                   embedder=None, binarizer: BinarizerParams | None = None,
                   config: RendererConfig | None = None) -> RendererParams:
    """Train one renderer of the schedule.

    ``material`` is ``"pretrain"`` (live corpus), ``"live"``, ``"all_spoof"``
    or a spoof material name.  A material fine-tune needs ``init`` (the
    all-spoof model) and runs ``config.finetune_epochs`` epochs; the other
    scopes run ``config.steps`` steps.  ``embedder`` and ``binarizer`` stay
    frozen; without a binarizer the identity term uses a soft relaxation of
    the classical binarizer.
    """
    config = config or RendererConfig()
    finetune = material not in SCOPES
    if finetune and init is None:
        raise LineageError(f"fine-tuning {material!r} needs a parent checkpoint")
    data = scope_records(dataset, material)
    if len(data) == 0:
        raise EmptyMaterialError(f"no records for {material!r}")

    grays, truths = [], []
    for r in data:
        g = data.load_image(r).astype(np.float32)
        if g.shape != (config.out_size, config.out_size):
            raise TrainConfigError(f"{r.image_path}: expected {config.out_size}px captures, got {g.shape}")
        grays.append(g)
        truths.append(_ground_truth(g, binarizer))
    real_all = torch.from_numpy(np.stack(grays))[:, None]
    truth_all = torch.from_numpy(np.stack(truths))[:, None]
    n, bs = len(real_all), config.batch_size
    steps = math.ceil(config.finetune_epochs * n / bs) if finetune else config.steps

    gen = seed_everything(config.seed)
    if init is None:
        params = RendererParams.init(config)
        params.material = material
    else:
        params = init.copy(material)
    G, D = params.generator, params.discriminator
    embedder = _frozen(embedder or ProjectionEmbedder())
    if binarizer is not None:
        _frozen(binarizer.net)

        def soft_ridge(t):
            return binarize(binarizer, t)
    else:
        soft_ridge = soft_classical_binarize

    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    G.train()
    D.train()
    w = config.weights
    for _ in range(steps):
        idx = torch.randint(n, (bs,), generator=gen)
        real, truth = real_all[idx], truth_all[idx]
        z = torch.randn(bs, G.z_dim, generator=gen)
        fake = G(resize(truth, params.in_size), z)

        loss_d = discriminator_loss(D(real), D(fake.detach()))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        with torch.no_grad():
            ref = embedder(real)
        adv = generator_loss(D(fake))
        emb = embedding_loss(ref, embedder(fake))
        ident = identity_loss(truth, 1.0 - soft_ridge(fake))
        loss_g = combine_generator_loss(adv, emb, ident, w)
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        step = len(params.losses) + 1
        params.losses.append((step, adv.item(), emb.item(), ident.item()))
        params.d_losses.append(loss_d.item())
        if config.log_every and step % config.log_every == 0:
            logger.info("renderer[%s] step %d adv %.4f emb %.4f ident %.2f disc %.4f", material, step,
                        *params.losses[-1][1:], params.d_losses[-1])
    G.eval()
    D.eval()
    if config.loss_log:
        write_loss_log(config.loss_log, LOSS_COLUMNS, params.losses)
    return params


def run_schedule(dataset: Dataset, out_dir, *, materials=None, embedder=None, binarizer=None,
                 pretrain: Dataset | None = None, config: RendererConfig | None = None) -> dict:
    """Pretrain, branch into live and all-spoof, then fine-tune per spoof material.

    Checkpoints and loss logs go to ``out_dir``; the returned lineage
    ``{material: {"checkpoint", "parent", "id", "parent_id"}}`` is also
    written to ``out_dir/lineage.json``.
    """
    config = config or RendererConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    materials = materials or [m for m in dataset.materials if m != "live"]
    lineage = {}

    def fit(name, init, parent, data):
        cfg = replace(config, loss_log=str(out / f"{name}_losses.csv"))
        p = train_renderer(data, init, name, embedder, binarizer, cfg)
        path = p.save(out / f"{name}.pt")
        lineage[name] = {"checkpoint": path.name, "parent": parent, "id": p.id, "parent_id": p.parent_id}
        return p

    base = fit("pretrain", None, None, pretrain or dataset)
    fit("live", base, "pretrain", dataset)
    spoof = fit("all_spoof", base, "pretrain", dataset)
    for m in materials:
        fit(m, spoof, "all_spoof", dataset)
    (out / "lineage.json").write_text(json.dumps(lineage, indent=2, sort_keys=True))
    return lineage


def load_lineage(path) -> dict:
    """Read a lineage file and check that every parent exists and the chain is acyclic."""
    lineage = json.loads(Path(path).read_text())
    for name in lineage:
        seen, cur = set(), name
        while cur is not None:
            if cur in seen:
                raise LineageError(f"lineage cycle through {cur!r}")
            seen.add(cur)
            parent = lineage[cur]["parent"]
            if parent is not None and parent not in lineage:
                raise LineageError(f"{cur!r} names unknown parent {parent!r}")
            cur = parent
    return lineage


def config_dict(config: RendererConfig) -> dict:
    return asdict(config)
