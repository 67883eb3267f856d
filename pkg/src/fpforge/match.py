"""Fixed-length identity embeddings, match scores and verification metrics.

The embedder is a stand-in for a deep fixed-length fingerprint
representation: either a small CNN trained with a margin-based contrastive
loss, or a deterministic random projection of the ridge map that needs no
training.  Scores are cosine similarities in [-1, 1].
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.transform import resize as sk_resize

from .binarize import classical_binarize
from .data import Dataset, ImpressionRecord
from .errors import MatchError, PairingError, TrainConfigError
from .metrics import threshold_at_rate
from .nn import as_batch, load_checkpoint, load_state, resize, save_checkpoint, seed_everything

logger = logging.getLogger(__name__)

EMBED_DIM = 192
PAIRINGS = ("live-live", "live-spoof")
IMPOSTER_CAP = 1_000_000


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


class ProjectionEmbedder:
    """Random Gaussian projection of the centered, downsampled ridge map.

    Needs no training; useful as a null model and for tests.  ``forward``
    is a differentiable variant that uses ``1 - gray`` as the ridge proxy.
    """

    kind = "projection"

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM, size: int = 64):
        self.seed, self.dim, self.size = seed, dim, size
        rng = np.random.default_rng(seed)
        self.matrix = rng.normal(size=(dim, size * size)) / np.sqrt(size * size)

    def embed(self, image) -> np.ndarray:
        ridge = classical_binarize(image).astype(np.float64)
        small = sk_resize(ridge, (self.size, self.size), order=1, anti_aliasing=True, mode="reflect")
        v = small.ravel()
        return _unit(self.matrix @ (v - v.mean()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(1.0 - x, size=(self.size, self.size), mode="area").flatten(1)
        x = x - x.mean(dim=1, keepdim=True)
        m = torch.as_tensor(self.matrix, dtype=x.dtype)
        return F.normalize(x @ m.T, dim=1)

    __call__ = forward

    def save(self, path):
        Path(path).write_text(json.dumps({"kind": self.kind, "seed": self.seed, "dim": self.dim, "size": self.size}))
        return Path(path)


class CNNEmbedder(nn.Module):
    """Small convolutional embedder producing unit-norm vectors."""

    kind = "cnn"

    def __init__(self, dim: int = EMBED_DIM, channels: int = 16, input_size: int = 128):
        super().__init__()
        self.dim, self.channels, self.input_size = dim, channels, input_size
        chs = [1, channels, channels * 2, channels * 4, channels * 4]
        layers = []
        for a, b in zip(chs[:-1], chs[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(chs[-1] * 2, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(resize(x, self.input_size) * 2.0 - 1.0)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return F.normalize(self.proj(pooled), dim=1)

    def embed(self, image) -> np.ndarray:
        x, _, _ = as_batch(image)
        self.eval()
        with torch.no_grad():
            r = self(x)[0].double().numpy()
        return _unit(r)

    def save(self, path):
        return save_checkpoint(path, "embedder", {"dim": self.dim, "channels": self.channels,
                                                  "input_size": self.input_size}, {"net": self})


def load_embedder(path):
    path = Path(path)
    if path.suffix == ".json":
        cfg = json.loads(path.read_text())
        return ProjectionEmbedder(cfg["seed"], cfg["dim"], cfg["size"])
    ck = load_checkpoint(path, "embedder")
    net = CNNEmbedder(**ck["arch"])
    load_state(net, ck["state"]["net"])
    net.eval()
    return net


def embed(params, image) -> np.ndarray:
    """Unit-norm embedding of one grayscale image."""
    return params.embed(image)


def match_score(r1, r2) -> float:
    """Cosine similarity of two embeddings."""
    a = np.asarray(r1, dtype=np.float64).ravel()
    b = np.asarray(r2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MatchError(f"embedding lengths differ: {a.size} vs {b.size}")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise MatchError("cannot score a zero vector")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


# -- training ---------------------------------------------------------------

@dataclass
class EmbedderConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    margin: float = 0.3
    channels: int = 16
    input_size: int = 128
    seed: int = 0


def contrastive_loss(sim: torch.Tensor, same: torch.Tensor, margin: float) -> torch.Tensor:
    """Pull genuine cosine similarities to 1; push imposters below ``margin``."""
    pos = (1.0 - sim) ** 2
    neg = F.relu(sim - margin) ** 2
    return torch.where(same, pos, neg).mean()


def train_embedder(dataset: Dataset, config: EmbedderConfig | None = None) -> CNNEmbedder:
    """Contrastive training on a multi-impression corpus (any materials)."""
    config = config or EmbedderConfig()
    by_finger: dict[str, list[int]] = {}
    for i, r in enumerate(dataset):
        by_finger.setdefault(r.finger_id, []).append(i)
    multi = [f for f, idx in by_finger.items() if len(idx) >= 2]
    if len(by_finger) < 2 or not multi:
        raise TrainConfigError("need >= 2 fingers and at least one with >= 2 images")
    gen = seed_everything(config.seed)
    images = torch.as_tensor(np.stack([dataset.load_image(r) for r in dataset]).astype(np.float32))[:, None]
    fingers = list(by_finger)
    net = CNNEmbedder(EMBED_DIM, config.channels, config.input_size)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    half = config.batch_size // 2
    net.train()
    for step in range(config.steps):
        a_idx, b_idx, same = [], [], []
        for k in range(config.batch_size):
            if k < half:
                f = multi[int(torch.randint(len(multi), (1,), generator=gen))]
                i, j = torch.randperm(len(by_finger[f]), generator=gen)[:2].tolist()
                a_idx.append(by_finger[f][i]); b_idx.append(by_finger[f][j]); same.append(True)
            else:
                fa, fb = torch.randperm(len(fingers), generator=gen)[:2].tolist()
                la, lb = by_finger[fingers[fa]], by_finger[fingers[fb]]
                a_idx.append(la[int(torch.randint(len(la), (1,), generator=gen))])
                b_idx.append(lb[int(torch.randint(len(lb), (1,), generator=gen))])
                same.append(False)
        ea, eb = net(images[a_idx]), net(images[b_idx])
        loss = contrastive_loss((ea * eb).sum(1), torch.tensor(same), config.margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            logger.info("embedder step %d loss %.4f", step, loss.item())
    net.eval()
    return net


# -- score distributions ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray
    genuine_pairs: tuple = ()
    imposter_pairs: tuple = ()
    label: str = ""

    def __post_init__(self):
        for name in ("genuine", "imposter"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(arr)):
                raise MatchError(f"{name} scores must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def counts(self) -> dict:
        return {"genuine": int(self.genuine.size), "imposter": int(self.imposter.size)}


def embed_dataset(dataset: Dataset, embedder) -> dict:
    return {r.key: embedder.embed(dataset.load_image(r)) for r in dataset}


def _different_finger_pairs(left, right, same_set: bool, cap: int, seed: int):
    """All (or ``cap`` uniformly sampled) cross-finger pairs between ``left`` and ``right``."""
    if same_set:
        def gen():
            return ((a, b) for a, b in itertools.combinations(left, 2) if a.finger_id != b.finger_id)
        total = sum(1 for _ in gen())
    else:
        def gen():
            return ((a, b) for a in left for b in right if a.finger_id != b.finger_id)
        total = sum(1 for a in left for b in right if a.finger_id != b.finger_id)
    if total <= cap:
        return list(gen())
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(total, size=cap, replace=False).tolist())
    return [p for k, p in enumerate(gen()) if k in keep]


def enumerate_pairs(dataset: Dataset, pairing: str = "live-live", material: str | None = None,
                    imposter_cap: int = IMPOSTER_CAP, seed: int = 0):
    """Genuine and imposter record pairs under a pairing rule.

    ``live-live``: unordered pairs of live impressions.  ``live-spoof``: every
    live impression against every spoof impression (optionally of a single
    ``material``).  Genuine pairs share a finger; imposters do not.
    """
    if pairing not in PAIRINGS:
        raise PairingError(f"pairing must be one of {PAIRINGS}")
    live = [r for r in dataset if r.is_live]
    if pairing == "live-live":
        genuine = [(a, b) for a, b in itertools.combinations(live, 2) if a.finger_id == b.finger_id]
        imposter = _different_finger_pairs(live, live, True, imposter_cap, seed)
    else:
        spoof = [r for r in dataset if not r.is_live and (material is None or r.material == material)]
        genuine = [(a, b) for a in live for b in spoof if a.finger_id == b.finger_id]
        imposter = _different_finger_pairs(live, spoof, False, imposter_cap, seed)
    if not genuine:
        raise PairingError(f"no genuine {pairing} pairs: need a finger with at least two usable impressions")
    return genuine, imposter


def score_distributions(dataset: Dataset, embedder, pairing: str = "live-live", *,
                        material: str | None = None, imposter_cap: int = IMPOSTER_CAP,
                        seed: int = 0, embeddings: dict | None = None) -> ScoreSet:
    genuine, imposter = enumerate_pairs(dataset, pairing, material, imposter_cap, seed)
    emb = embeddings if embeddings is not None else embed_dataset(dataset, embedder)

    def score(pairs):
        return [match_score(emb[a.key], emb[b.key]) for a, b in pairs]

    label = pairing if material is None else f"live-{material}"
    return ScoreSet(
        genuine=score(genuine),
        imposter=score(imposter),
        genuine_pairs=tuple((a.key, b.key) for a, b in genuine),
        imposter_pairs=tuple((a.key, b.key) for a, b in imposter),
        label=label,
    )


def tar_at_far(scores: ScoreSet, far_targets) -> list[tuple[float, float, float]]:
    """``(FAR, threshold, TAR)`` for each target false accept rate.

    The threshold is the smallest observed score (or the value just above
    the largest) at which the fraction of imposters scoring at or above it
    does not exceed the target.
    """
    targets = list(far_targets)
    if not targets:
        raise MatchError("no FAR targets given")
    out = []
    for far in targets:
        tau, tar = threshold_at_rate(scores.imposter, scores.genuine, far)
        out.append((float(far), tau, tar))
    return out


def write_scores_csv(path, scoresets: dict) -> Path:
    """``label,score`` rows; labels read ``<name>:genuine`` / ``<name>:imposter``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "score"])
        for name, s in scoresets.items():
            for kind in ("genuine", "imposter"):
                for v in getattr(s, kind):
                    w.writerow([f"{name}:{kind}", repr(float(v))])
    return path


def read_scores_csv(path) -> dict:
    groups: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            name, kind = row["label"].rsplit(":", 1)
            groups.setdefault(name, {"genuine": [], "imposter": []})[kind].append(float(row["score"]))
    return {n: ScoreSet(g["genuine"], g["imposter"], label=n) for n, g in groups.items()}


# -- identity leakage -----------------------------------------------------------

@dataclass
class LeakageReport:
    pairs: list = field(default_factory=list)
    flagged_fingers: int = 0
    max_score: float = float("nan")
    total_comparisons: int = 0
    threshold: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def _stack(dataset: Dataset, embedder) -> tuple[list[ImpressionRecord], np.ndarray]:
    recs = list(dataset)
    return recs, np.stack([embedder.embed(dataset.load_image(r)) for r in recs])


def leakage_check(synthetic: Dataset, training: Dataset, embedder, threshold: float, *,
                  workers: int = 1, shard_size: int = 1024) -> LeakageReport:
    """Score every synthetic image against every training image and flag
    pairs at or above ``threshold``.

    The cross product is split into row shards which may be scored by
    ``workers`` threads; shards are merged in order, so the report does not
    depend on the worker count.
    """
    if len(synthetic) == 0 or len(training) == 0:
        raise PairingError("both datasets must be non-empty")
    srecs, S = _stack(synthetic, embedder)
    trecs, T = _stack(training, embedder)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    starts = list(range(0, len(srecs), shard_size))

    def shard(start):
        block = np.clip(S[start:start + shard_size] @ T.T, -1.0, 1.0)
        hits = [(start + i, j, float(block[i, j])) for i, j in zip(*np.nonzero(block >= threshold))]
        return hits, float(block.max())

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(shard, starts))
    else:
        results = [shard(s) for s in starts]
    hits = [h for part, _ in results for h in part]
    pairs = [
        {"synthetic": list(srecs[i].key), "training": list(trecs[j].key), "score": s}
        for i, j, s in hits
    ]
    return LeakageReport(
        pairs=pairs,
        flagged_fingers=len({srecs[i].finger_id for i, _, _ in hits}),
        max_score=max(m for _, m in results),
        total_comparisons=len(srecs) * len(trecs),
        threshold=float(threshold),
    )
