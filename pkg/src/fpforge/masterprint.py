"""Binary master-print GAN: identity latents to 256x256 ridge images.

Master prints use image polarity: ridges 0 (black), background 1 (white), so
that warping can fill exposed regions with white background.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.transform import resize as sk_resize
from torch.nn.utils.parametrizations import spectral_norm

from .binarize import classical_binarize
from .data import Dataset
from .errors import EmptyBatch, ParamsError, TrainConfigError
from .nn import load_checkpoint, load_state, save_checkpoint, seed_everything, write_loss_log

logger = logging.getLogger(__name__)

LATENT_DIM = 256
MASTER_SIZE = 256
HARD_THRESHOLD = 0.5
LOGIT_CLAMP = 30.0


def sample_identity_latent(seed: int, dim: int = LATENT_DIM) -> np.ndarray:
    """``dim`` i.i.d. standard-normal entries, a pure function of ``seed``."""
    return np.random.default_rng(seed).standard_normal(dim)


@dataclass(frozen=True, eq=False)
class MasterPrint:
    image: np.ndarray  # soft map in [0, 1]
    threshold: float = HARD_THRESHOLD

    def hard(self) -> np.ndarray:
        return (self.image >= self.threshold).astype(np.uint8)


def _logits(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.numel() == 0:
        raise EmptyBatch("discriminator score batches must be non-empty")
    if not torch.isfinite(t).all():
        raise ValueError("discriminator scores must be finite")
    return t.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    return -F.logsigmoid(_logits(d_real)).mean() - F.logsigmoid(-_logits(d_fake)).mean()


def generator_loss(d_fake) -> torch.Tensor:
    return -F.logsigmoid(_logits(d_fake)).mean()


def adversarial_loss(d_real, d_fake):
    """Standard GAN objective on discriminator logits.

    Returns ``(loss_G, loss_D)`` with::

        loss_D = -mean(log sigmoid(d_real)) - mean(log(1 - sigmoid(d_fake)))
        loss_G = -mean(log sigmoid(d_fake))          # non-saturating

    Logits are clamped to +/-30 first.
    """
    return generator_loss(d_fake), discriminator_loss(d_real, d_fake)


# -- networks -------------------------------------------------------------

def channel_schedule(ch: int, levels: int, max_mult: int = 8) -> list[int]:
    """Channels from coarse (index 0) to fine (index ``levels``)."""
    return [ch * min(2 ** (levels - i), max_mult) for i in range(levels + 1)]


class GBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.interpolate(F.relu(self.bn1(x)), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.bn2(self.conv1(h))))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    """Residual up-sampling generator: 4x4 base, ``n_up`` doublings."""

    def __init__(self, latent_dim: int = LATENT_DIM, ch: int = 8, n_up: int = 6):
        super().__init__()
        self.latent_dim, self.n_up, self.ch = latent_dim, n_up, ch
        chs = channel_schedule(ch, n_up)
        self.base = chs[0]
        self.fc = nn.Linear(latent_dim, chs[0] * 16)
        self.blocks = nn.Sequential(*(GBlock(a, b) for a, b in zip(chs[:-1], chs[1:])))
        self.bn = nn.BatchNorm2d(chs[-1])
        self.out = nn.Conv2d(chs[-1], 1, 3, padding=1)

    @property
    def size(self) -> int:
        return 4 * 2**self.n_up

    def forward(self, z):
        h = self.fc(z).view(-1, self.base, 4, 4)
        h = self.blocks(h)
        return torch.sigmoid(self.out(F.relu(self.bn(h))))


class DBlock(nn.Module):
    def __init__(self, cin, cout, preactivate=True, sn=True):
        super().__init__()
        wrap = spectral_norm if sn else (lambda m: m)
        self.pre = preactivate
        self.conv1 = wrap(nn.Conv2d(cin, cout, 3, padding=1))
        self.conv2 = wrap(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = wrap(nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        h = F.relu(x) if self.pre else x
        h = self.conv2(F.relu(self.conv1(h)))
        return F.avg_pool2d(h, 2) + F.avg_pool2d(self.skip(x), 2)


class Discriminator(nn.Module):
    """Mirror of the generator: ``n_down`` residual down blocks, then a linear logit."""

    def __init__(self, ch: int = 8, n_down: int = 6, in_channels: int = 1, sn: bool = True):
        super().__init__()
        chs = channel_schedule(ch, n_down)[::-1]
        self.n_down, self.ch = n_down, ch
        blocks = [DBlock(in_channels, chs[1], preactivate=False, sn=sn)]
        blocks += [DBlock(a, b, sn=sn) for a, b in zip(chs[1:-1], chs[2:])]
        self.blocks = nn.Sequential(*blocks)
        self.fc = spectral_norm(nn.Linear(chs[-1], 1)) if sn else nn.Linear(chs[-1], 1)

    def forward(self, x):
        h = F.relu(self.blocks(x * 2.0 - 1.0))
        return self.fc(h.sum(dim=(2, 3))).squeeze(1)


# -- params / checkpoints ---------------------------------------------------

@dataclass
class GanConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 5e-5  # slower D keeps the generator from collapsing to blank output
    beta1: float = 0.0
    beta2: float = 0.999
    ch: int = 8
    n_up: int = 6
    latent_dim: int = LATENT_DIM
    instance_noise: float = 0.2  # std of Gaussian noise on D inputs; real masters are exactly binary
    anneal_noise: bool = False  # decay the noise linearly to zero over ``steps``; collapse-prone on some seeds
    seed: int = 0
    log_every: int = 100
    loss_log: str | None = None


@dataclass
class GanParams:
    generator: Generator
    discriminator: Discriminator
    step: int = 0
    losses: list = field(default_factory=list)  # (step, loss_G, loss_D)

    @property
    def arch(self) -> dict:
        g = self.generator
        return {"latent_dim": g.latent_dim, "n_up": g.n_up, "ch": g.ch}

    def save(self, path):
        return save_checkpoint(path, "masterprint_gan", self.arch,
                               {"G": self.generator, "D": self.discriminator}, {"step": self.step})

    @classmethod
    def load(cls, path) -> "GanParams":
        ck = load_checkpoint(path, "masterprint_gan")
        a = ck["arch"]
        g = Generator(a["latent_dim"], a["ch"], a["n_up"])
        d = Discriminator(a["ch"], a["n_up"])
        load_state(g, ck["state"]["G"])
        load_state(d, ck["state"]["D"])
        g.eval()
        d.eval()
        return cls(g, d, ck["extra"].get("step", 0))

    @classmethod
    def init(cls, config: GanConfig | None = None) -> "GanParams":
        config = config or GanConfig()
        seed_everything(config.seed)
        g = Generator(config.latent_dim, config.ch, config.n_up)
        d = Discriminator(config.ch, config.n_up)
        g.eval()
        return cls(g, d)


def generate_masterprint(params: GanParams, z) -> MasterPrint:
    """Soft master print for one identity latent (generator in inference mode)."""
    z = np.asarray(z, dtype=np.float32)
    if z.shape != (params.generator.latent_dim,):
        raise ParamsError(f"latent of shape {z.shape} does not fit generator input {params.generator.latent_dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent must be finite")
    g = params.generator
    was_training = g.training
    g.eval()
    with torch.no_grad():
        img = g(torch.from_numpy(z)[None])[0, 0].double().numpy()
    g.train(was_training)
    return MasterPrint(np.clip(img, 0.0, 1.0))


# -- training -----------------------------------------------------------------

def prepare_corpus(dataset: Dataset, size: int = MASTER_SIZE) -> np.ndarray:
    """Live captures resized to ``size`` and binarized to image polarity."""
    spoofs = [r for r in dataset if not r.is_live]
    if spoofs:
        raise TrainConfigError(f"master-print training takes live impressions only; found {len(spoofs)} spoof records")
    out = []
    for r in dataset:
        g = dataset.load_image(r)
        if g.shape != (size, size):
            g = sk_resize(g, (size, size), order=1, anti_aliasing=True, mode="reflect")
        out.append(1.0 - classical_binarize(g))
    return np.stack(out).astype(np.float32)


def train_masterprint_gan(dataset, config: GanConfig | None = None, init: GanParams | None = None) -> GanParams:
    """Adversarial training of the master-print generator.

    ``dataset`` is a :class:`Dataset` of live captures (binarized here) or an
    ``(N, S, S)`` array of binary images already in image polarity.
    """
    config = config or GanConfig()
    size = 4 * 2**config.n_up
    if isinstance(dataset, Dataset):
        data = prepare_corpus(dataset, size)
    else:
        data = np.asarray(dataset, dtype=np.float32)
        if data.ndim != 3 or data.shape[1:] != (size, size):
            raise TrainConfigError(f"expected (N, {size}, {size}) binary images, got {data.shape}")
        if not np.isin(data, (0.0, 1.0)).all():
            raise TrainConfigError("training images must be binary")
    if len(data) == 0:
        raise TrainConfigError("empty training corpus")

    gen = seed_everything(config.seed)
    params = init or GanParams.init(config)
    G, D = params.generator, params.discriminator
    G.train()
    D.train()
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2))
    real_all = torch.from_numpy(data)[:, None]
    bs = config.batch_size
    for _ in range(config.steps):
        real = real_all[torch.randint(len(real_all), (bs,), generator=gen)]
        z = torch.randn(bs, G.latent_dim, generator=gen)
        fake = G(z)
        noise = config.instance_noise
        if config.anneal_noise:
            noise *= 1.0 - params.step / config.steps

        def jitter(x):
            return x + noise * torch.randn(x.shape, generator=gen) if noise else x

        loss_d = discriminator_loss(D(jitter(real)), D(jitter(fake.detach())))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        loss_g = generator_loss(D(jitter(fake)))
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        params.step += 1
        params.losses.append((params.step, loss_g.item(), loss_d.item()))
        if config.log_every and params.step % config.log_every == 0:
            logger.info("masterprint step %d loss_G %.4f loss_D %.4f", params.step, loss_g.item(), loss_d.item())
    G.eval()
    D.eval()
    if config.loss_log:
        write_loss_log(config.loss_log, ["step", "loss_G", "loss_D"], params.losses)
    return params


def config_dict(config) -> dict:
    return asdict(config)
