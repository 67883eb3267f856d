"""Ridge binarization: a classical adaptive threshold and a trainable autoencoder.

Binary ridge maps use ridges = 1, background = 0.  Grayscale inputs follow
the capture convention of dark ridges on a white background.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .data import Dataset
from .errors import TrainConfigError
from .nn import as_batch, load_checkpoint, load_state, restore_shape, save_checkpoint, seed_everything

logger = logging.getLogger(__name__)

WINDOW = 25
OFFSET = 0.02
VAR_THRESHOLD = 1e-4


def _local_stats(g: np.ndarray, window: int):
    mean = ndimage.uniform_filter(g, window, mode="reflect")
    var = ndimage.uniform_filter(g * g, window, mode="reflect") - mean * mean
    return mean, var


def classical_binarize(gray, window: int = WINDOW, offset: float = OFFSET,
                       var_threshold: float = VAR_THRESHOLD) -> np.ndarray:
    """Local-mean threshold with a 3x3 median despeckle; returns uint8 {0, 1}.

    A pixel is ridge when it is darker than its local mean by more than
    ``offset``.  Regions whose local variance is below ``var_threshold``
    carry no ridge structure and are set to background.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty image")
    mean, var = _local_stats(g, window)
    ridge = (g < mean - offset).astype(np.uint8)
    ridge = ndimage.median_filter(ridge, size=3, mode="reflect")
    ridge[var < var_threshold] = 0
    return ridge


def segment_foreground(gray, window: int = WINDOW, var_threshold: float = VAR_THRESHOLD) -> np.ndarray:
    """Boolean fingerprint-area mask from local variance, cleaned up morphologically."""
    g = np.asarray(gray, dtype=np.float64)
    _, var = _local_stats(g, window)
    mask = var >= var_threshold
    if not mask.any():
        return mask
    mask = ndimage.binary_closing(mask, structure=np.ones((5, 5)), iterations=2)
    mask = ndimage.binary_fill_holes(mask)
    return ndimage.binary_opening(mask, structure=np.ones((5, 5)))


def soft_classical_binarize(gray: torch.Tensor, window: int = WINDOW, offset: float = OFFSET,
                            temperature: float = 0.02) -> torch.Tensor:
    """Differentiable relaxation of :func:`classical_binarize` for ``(N, 1, H, W)`` tensors.

    The step ``gray < mean - offset`` becomes a sigmoid of width
    ``temperature``; there is no despeckle or variance mask.
    """
    r = window // 2
    mean = F.avg_pool2d(F.pad(gray, (r, r, r, r), mode="reflect"), window, stride=1)
    return torch.sigmoid((mean - offset - gray) / temperature)


def hard(soft, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(soft) >= threshold).astype(np.uint8)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BinarizerNet(nn.Module):
    """Four-level convolutional autoencoder with skips on all but the deepest level."""

    def __init__(self, channels: int = 16, depth: int = 4):
        super().__init__()
        self.depth = depth
        chs = [min(channels * 2**i, channels * 8) for i in range(depth + 1)]
        self.stem = _block(1, chs[0])
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1), nn.ReLU(inplace=True), _block(chs[i + 1], chs[i + 1]))
            for i in range(depth)
        )
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            skip = chs[i] if i < depth - 1 else 0
            self.up.append(_block(chs[i + 1] + skip, chs[i]))
        self.head = nn.Conv2d(chs[0], 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2**self.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        # gray in [0,1] -> centered
        y = self.stem(x * 2.0 - 1.0)
        skips = []
        for down in self.down:
            skips.append(y)
            y = down(y)
        for j, up in enumerate(self.up):
            i = self.depth - 1 - j
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            if i < self.depth - 1:
                y = torch.cat([y, skips[i]], dim=1)
            y = up(y)
        return torch.sigmoid(self.head(y))[..., :h, :w]


@dataclass
class BinarizerConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    channels: int = 16
    crop: int | None = None
    seed: int = 0
    log_every: int = 100


@dataclass
class BinarizerParams:
    net: BinarizerNet
    config: BinarizerConfig = field(default_factory=BinarizerConfig)
    losses: list = field(default_factory=list)

    def save(self, path):
        return save_checkpoint(path, "binarizer", {"channels": self.config.channels, "depth": self.net.depth},
                               {"net": self.net}, {"config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "BinarizerParams":
        ck = load_checkpoint(path, "binarizer")
        net = BinarizerNet(**ck["arch"])
        load_state(net, ck["state"]["net"])
        net.eval()
        return cls(net, BinarizerConfig(**ck["extra"]["config"]))

    def __call__(self, gray):
        return binarize(self, gray)


def _pairs_from(pairs):
    if isinstance(pairs, Dataset):
        out = []
        for r in pairs:
            g = pairs.load_image(r)
            out.append((g, classical_binarize(g)))
        return out
    return list(pairs)


def train_binarizer(pairs, config: BinarizerConfig | None = None) -> BinarizerParams:
    """Fit the autoencoder to (gray, binary) pairs by per-pixel binary cross-entropy.

    ``pairs`` is a sequence of ``(gray, binary)`` arrays or a :class:`Dataset`
    of grayscale images, in which case the classical binarizer is the teacher.
    """
    config = config or BinarizerConfig()
    pairs = _pairs_from(pairs)
    if not pairs:
        raise TrainConfigError("need at least one (gray, binary) pair")
    shapes = set()
    for g, b in pairs:
        g, b = np.asarray(g), np.asarray(b)
        if g.shape != b.shape:
            raise TrainConfigError(f"gray {g.shape} and binary {b.shape} differ in shape")
        if not np.isin(b, (0, 1)).all():
            raise TrainConfigError("binary targets must be in {0, 1}")
        shapes.add(g.shape)
    if len(shapes) != 1 and config.crop is None:
        raise TrainConfigError("pairs of mixed sizes need a crop size")

    gen = seed_everything(config.seed)
    gray = torch.as_tensor(np.stack([np.asarray(g, np.float32) for g, _ in pairs]))[:, None]
    target = torch.as_tensor(np.stack([np.asarray(b, np.float32) for _, b in pairs]))[:, None]
    net = BinarizerNet(config.channels)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    losses = []
    n = len(pairs)
    net.train()
    for step in range(config.steps):
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        x, y = gray[idx], target[idx]
        if config.crop is not None and config.crop < x.shape[-1]:
            H, W = x.shape[-2:]
            oy = int(torch.randint(H - config.crop + 1, (1,), generator=gen))
            ox = int(torch.randint(W - config.crop + 1, (1,), generator=gen))
            x = x[..., oy:oy + config.crop, ox:ox + config.crop]
            y = y[..., oy:oy + config.crop, ox:ox + config.crop]
        loss = F.binary_cross_entropy(net(x).clamp(1e-6, 1 - 1e-6), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            logger.info("binarizer step %d loss %.5f", step, losses[-1])
    net.eval()
    return BinarizerParams(net, config, losses)


def binarize(params: BinarizerParams, gray):
    """Soft ridge map in [0, 1] with the shape of ``gray``.

    Numpy input gives numpy output; a torch tensor stays on the autograd
    graph so the map can sit inside a training loss.
    """
    x, is_numpy, shape = as_batch(gray)
    net = params.net
    if x.dtype != next(net.parameters()).dtype:
        x = x.to(next(net.parameters()).dtype)
    if is_numpy:
        with torch.no_grad():
            y = net(x)
    else:
        y = net(x)
    return restore_shape(y, is_numpy, shape)
