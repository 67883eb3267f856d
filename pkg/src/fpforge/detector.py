"""Two-branch presentation-attack detector with score fusion.

One classifier sees the whole image, the other 96x96 patches centred on
minutiae.  Scores are spoof probabilities (higher = more spoof-like); the
patch-branch score of an image is the mean over its patches and the fused
score is a fixed convex combination of the two branch scores.

The augmentation experiment trains detectors on mixes of real and synthetic
data and reports TDR at a fixed FDR per evaluation set.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .binarize import classical_binarize, segment_foreground
from .data import Dataset
from .errors import ConfigError, EmptyPatchSet, ExperimentError, ParamsError, TrainConfigError
from .metrics import threshold_at_rate
from .minutiae import Minutia, extract_minutiae
from .nn import load_checkpoint, load_state, params_digest, resize, save_checkpoint, seed_everything

logger = logging.getLogger(__name__)

PATCH_SIZE = 96
FDR_TARGET = 0.002
BRANCHES = ("whole", "patch")
COMPOSITIONS = ("synthetic_only", "synthetic_plus_real_live", "real_only", "real_plus_synthetic")
REAL_FRACTIONS = (0, 25, 50, 75, 100)
RESULT_COLUMNS = ["composition", "real_fraction", "eval_set", "tdr_at_fdr_0.2pct", "threshold"]


# -- patches ----------------------------------------------------------------

def extract_minutiae_patches(image, minutiae: Sequence[Minutia], size: int = PATCH_SIZE,
                             max_patches: int | None = None) -> list[np.ndarray]:
    """Square crops centred on minutiae, best quality first.

    Windows that would cross the border are shifted back inside the image;
    images smaller than ``size`` are edge-padded first.
    """
    if len(minutiae) == 0:
        raise EmptyPatchSet("no minutiae to centre patches on")
    img = np.asarray(image)
    h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
        h, w = img.shape
    order = sorted(range(len(minutiae)), key=lambda i: -minutiae[i].quality)
    if max_patches is not None:
        order = order[:max_patches]
    half = size // 2
    out = []
    for i in order:
        m = minutiae[i]
        y0 = min(max(int(m.y) - half, 0), h - size)
        x0 = min(max(int(m.x) - half, 0), w - size)
        out.append(img[y0:y0 + size, x0:x0 + size].copy())
    return out


def image_minutiae(gray) -> list[Minutia]:
    """Minutiae of a grayscale capture via the classical binarizer and foreground mask."""
    mask = segment_foreground(gray)
    return extract_minutiae(classical_binarize(gray) * mask, mask=mask)


# -- backbones --------------------------------------------------------------

class SmallCNN(nn.Module):
    """Four strided conv blocks, global average pool, one logit."""

    def __init__(self, channels: int = 16):
        super().__init__()
        chs = [1, channels, channels * 2, channels * 4, channels * 4]
        layers = []
        for a, b in zip(chs[:-1], chs[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(chs[-1], 1)

    def forward(self, x):
        return self.fc(self.features(x * 2.0 - 1.0).mean(dim=(2, 3))).squeeze(1)


class InceptionBackbone(nn.Module):
    """torchvision Inception v3 (random init) on 299 px, gray replicated to 3 channels."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigError("the inception_v3 backbone needs torchvision") from exc
        self.net = inception_v3(weights=None, aux_logits=False, init_weights=True, num_classes=1)

    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x.repeat(1, 3, 1, 1) * 2.0 - 1.0).squeeze(1)


def make_backbone(name: str, channels: int = 16) -> nn.Module:
    if name == "small_cnn":
        return SmallCNN(channels)
    if name == "inception_v3":
        return InceptionBackbone()
    raise ConfigError(f"unknown backbone {name!r}")


# -- config / params --------------------------------------------------------

@dataclass
class DetectorConfig:
    """Training settings.  Optimizer, learning rate and decay follow the
    full-scale protocol; ``steps`` is the desk-scale default and
    ``full_scale_steps`` the documented full-scale count."""

    lr: float = 0.01
    optimizer: str = "adam"
    schedule: str = "step"
    decay_every: int | None = None  # default: half of ``steps``
    decay_gamma: float = 0.1
    steps: int = 2000
    full_scale_steps: int = 200_000
    batch_size: int = 16
    backbone: str = "small_cnn"
    channels: int = 16
    whole_size: int = 128
    patch_size: int = PATCH_SIZE
    patches_per_image: int = 8
    val_fraction: float = 0.2
    seed: int = 0
    log_every: int = 100


@dataclass(frozen=True)
class FusionConfig:
    w_patch: float = 0.8
    w_whole: float = 0.2

    def __post_init__(self):
        if self.w_patch < 0 or self.w_whole < 0 or abs(self.w_patch + self.w_whole - 1.0) > 1e-12:
            raise ValueError("fusion weights must be non-negative and sum to 1")


@dataclass
class BranchParams:
    branch: str
    net: nn.Module
    backbone: str = "small_cnn"
    channels: int = 16
    input_size: int = 128
    history: list = field(default_factory=list)  # (step, loss)
    val_accuracy: float = float("nan")

    @property
    def digest(self) -> str:
        return params_digest(self.net)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Spoof probabilities for a stack of ``(N, H, W)`` images."""
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))[:, None]
        self.net.eval()
        with torch.no_grad():
            p = torch.sigmoid(self.net(resize(x, self.input_size)))
        return p.double().numpy()


@dataclass
class DetectorParams:
    whole: BranchParams | None = None
    patch: BranchParams | None = None
    patch_size: int = PATCH_SIZE
    max_patches: int | None = 32

    def save(self, path):
        arch, modules = {"patch_size": self.patch_size, "max_patches": self.max_patches}, {}
        extra = {}
        for b in (self.whole, self.patch):
            if b is None:
                continue
            arch[b.branch] = {"backbone": b.backbone, "channels": b.channels, "input_size": b.input_size}
            modules[b.branch] = b.net
            extra[b.branch] = {"val_accuracy": b.val_accuracy}
        return save_checkpoint(path, "detector", arch, modules, extra)

    @classmethod
    def load(cls, path) -> "DetectorParams":
        ck = load_checkpoint(path, "detector")
        a = ck["arch"]
        out = cls(patch_size=a["patch_size"], max_patches=a["max_patches"])
        for name in BRANCHES:
            if name in a:
                net = make_backbone(a[name]["backbone"], a[name]["channels"])
                load_state(net, ck["state"][name])
                net.eval()
                setattr(out, name, BranchParams(name, net, a[name]["backbone"], a[name]["channels"],
                                                a[name]["input_size"],
                                                val_accuracy=ck["extra"][name]["val_accuracy"]))
        return out


# -- training ---------------------------------------------------------------

def _as_datasets(dataset) -> list[Dataset]:
    return [dataset] if isinstance(dataset, Dataset) else list(dataset)


class SampleCache:
    """Images and minutiae by absolute path, shared across training runs."""

    def __init__(self):
        self._img, self._min = {}, {}

    def image(self, ds: Dataset, r) -> np.ndarray:
        p = str(ds.path_of(r))
        if p not in self._img:
            self._img[p] = ds.load_image(r).astype(np.float32)
        return self._img[p]

    def minutiae(self, ds: Dataset, r) -> list[Minutia]:
        p = str(ds.path_of(r))
        if p not in self._min:
            self._min[p] = image_minutiae(self.image(ds, r))
        return self._min[p]


def _samples(datasets, branch, config, cache):
    """Training inputs, labels (1 = spoof) and group ids (one group per finger)."""
    xs, ys, groups = [], [], []
    for ds in datasets:
        for r in ds:
            img = cache.image(ds, r)
            group = f"{ds.root}|{r.finger_id}"
            if branch == "whole":
                items = [img]
            else:
                mins = cache.minutiae(ds, r)
                items = extract_minutiae_patches(img, mins, config.patch_size, config.patches_per_image) if mins else []
            for it in items:
                xs.append(it)
                ys.append(0.0 if r.is_live else 1.0)
                groups.append(group)
    return xs, np.asarray(ys, dtype=np.float32), groups


def _split_groups(groups, fraction, seed):
    uniq = sorted(set(groups))
    if fraction <= 0 or len(uniq) < 2:
        return set(uniq), set()
    rng = np.random.default_rng(seed)
    rng.shuffle(uniq)
    n_val = min(len(uniq) - 1, max(1, round(fraction * len(uniq))))
    return set(uniq[n_val:]), set(uniq[:n_val])


def train_detector(dataset, branch: str = "whole", config: DetectorConfig | None = None,
                   cache: SampleCache | None = None) -> BranchParams:
    """Train one branch as a binary live/spoof classifier.

    ``dataset`` is a :class:`Dataset` or a list of them.  A random subset of
    fingers (``val_fraction``) is held out and the final validation accuracy
    at a 0.5 threshold is recorded on the returned params.
    """
    config = config or DetectorConfig()
    if branch not in BRANCHES:
        raise ConfigError(f"branch must be one of {BRANCHES}")
    datasets = _as_datasets(dataset)
    labels = {r.is_live for ds in datasets for r in ds}
    if labels != {True, False}:
        raise TrainConfigError("detector training needs both live and spoof records")
    cache = cache or SampleCache()
    xs, ys, groups = _samples(datasets, branch, config, cache)
    if len(set(ys.tolist())) < 2:
        raise TrainConfigError(f"{branch} branch: samples cover only one class")
    size = config.whole_size if branch == "whole" else config.patch_size
    x_all = torch.cat([resize(torch.as_tensor(x)[None, None], size) for x in xs])
    y_all = torch.as_tensor(ys)
    train_g, val_g = _split_groups(groups, config.val_fraction, config.seed)
    tr = torch.as_tensor([g in train_g for g in groups])
    x_tr, y_tr = x_all[tr], y_all[tr]
    if len(set(y_tr.tolist())) < 2:
        x_tr, y_tr, tr = x_all, y_all, torch.ones(len(y_all), dtype=torch.bool)

    gen = seed_everything(config.seed)
    net = make_backbone(config.backbone, config.channels)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    elif config.optimizer == "sgd":
        opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=0.9)
    else:
        raise ConfigError(f"unknown optimizer {config.optimizer!r}")
    sched = None
    if config.schedule == "step":
        every = config.decay_every or max(1, config.steps // 2)
        sched = torch.optim.lr_scheduler.StepLR(opt, every, config.decay_gamma)
    elif config.schedule != "constant":
        raise ConfigError(f"unknown schedule {config.schedule!r}")

    params = BranchParams(branch, net, config.backbone, config.channels, size)
    net.train()
    bs = min(config.batch_size, len(y_tr))
    for step in range(1, config.steps + 1):
        idx = torch.randint(len(y_tr), (bs,), generator=gen)
        loss = F.binary_cross_entropy_with_logits(net(x_tr[idx]), y_tr[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        params.history.append((step, loss.item()))
        if config.log_every and step % config.log_every == 0:
            logger.info("detector[%s] step %d loss %.4f", branch, step, loss.item())
    net.eval()
    val = ~tr
    if val.any():
        p = params.predict(x_all[val, 0].numpy())
        params.val_accuracy = float(((p >= 0.5) == (y_all[val].numpy() >= 0.5)).mean())
    logger.info("detector[%s] validation accuracy %.4f", branch, params.val_accuracy)
    return params


def train_two_branch(dataset, config: DetectorConfig | None = None, cache: SampleCache | None = None) -> DetectorParams:
    cache = cache or SampleCache()
    return DetectorParams(train_detector(dataset, "whole", config, cache),
                          train_detector(dataset, "patch", config, cache),
                          (config or DetectorConfig()).patch_size)


# -- scoring ----------------------------------------------------------------

def fuse_scores(patch_score: float, whole_score: float, fusion: FusionConfig = FusionConfig()) -> float:
    """``w_patch * patch + w_whole * whole``, evaluated exactly in that order."""
    return float(fusion.w_patch * patch_score + fusion.w_whole * whole_score)


def spoof_score(params: DetectorParams, image, minutiae: Sequence[Minutia] | None = None,
                fusion: FusionConfig = FusionConfig()) -> float:
    """Fused spoof score in [0, 1]; falls back to the whole-image score without minutiae."""
    if params.whole is None or params.patch is None:
        raise ParamsError("both detector branches must be trained")
    img = np.asarray(image, dtype=np.float32)
    whole = float(params.whole.predict(img[None])[0])
    if minutiae is None:
        minutiae = image_minutiae(img)
    try:
        patches = extract_minutiae_patches(img, minutiae, params.patch_size, params.max_patches)
    except EmptyPatchSet:
        return whole
    patch = float(params.patch.predict(np.stack(patches)).mean())
    return fuse_scores(patch, whole, fusion)


@dataclass(frozen=True, eq=False)
class DetectionScoreSet:
    """Spoof scores of live and spoof images (higher = more spoof-like)."""

    live_scores: tuple
    spoof_scores: tuple

    def __post_init__(self):
        object.__setattr__(self, "live_scores", tuple(float(s) for s in self.live_scores))
        object.__setattr__(self, "spoof_scores", tuple(float(s) for s in self.spoof_scores))


def score_dataset(params: DetectorParams, dataset: Dataset, fusion: FusionConfig = FusionConfig(),
                  cache: SampleCache | None = None) -> DetectionScoreSet:
    cache = cache or SampleCache()
    live, spoof = [], []
    for r in dataset:
        s = spoof_score(params, cache.image(dataset, r), cache.minutiae(dataset, r), fusion)
        (live if r.is_live else spoof).append(s)
    return DetectionScoreSet(live, spoof)


def tdr_at_fdr(scores, fdr_target: float = FDR_TARGET) -> tuple[float, float]:
    """``(threshold, TDR)``: the smallest threshold passing at most ``fdr_target``
    of live scores, and the fraction of spoof scores at or above it."""
    if isinstance(scores, DetectionScoreSet):
        live, spoof = scores.live_scores, scores.spoof_scores
    else:
        live, spoof = scores
    return threshold_at_rate(live, spoof, fdr_target)


# -- augmentation experiment ----------------------------------------------------

def _fraction_subset(ds: Dataset, percent: float, seed: int) -> Dataset:
    fingers = list(ds.finger_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(fingers)
    keep = fingers[:int(round(len(fingers) * percent / 100.0))]
    return ds.filter(finger_ids=keep)


def composition_sets(composition: str, real: Dataset, synthetic: Dataset, percent: float, seed: int = 0):
    """Training datasets of one experiment cell (possibly empty)."""
    part = _fraction_subset(real.filter(split="train"), percent, seed)
    sets = {
        "synthetic_only": [synthetic],
        "synthetic_plus_real_live": [synthetic, part.filter(is_live=True)],
        "real_only": [part],
        "real_plus_synthetic": [part, synthetic],
    }
    if composition not in sets:
        raise ExperimentError(f"unknown composition {composition!r}")
    return [d for d in sets[composition] if len(d)]


def _training_key(datasets) -> str:
    h = hashlib.blake2b(digest_size=16)
    for ds in sorted(datasets, key=lambda d: str(d.root)):
        for r in sorted(ds, key=lambda r: r.key):
            h.update(f"{ds.root}|{r.image_path}|{r.is_live}\n".encode())
    return h.hexdigest()


@dataclass
class ExperimentResult:
    rows: list  # (composition, real_fraction, eval_set, tdr, threshold)
    skipped: list  # (composition, real_fraction, reason)
    trained: int = 0

    def table(self, real_fraction: float = 100) -> dict:
        """Composition -> {eval_set: TDR} at one real fraction."""
        out = {}
        for c, f, e, tdr, _ in self.rows:
            if f == real_fraction:
                out.setdefault(c, {})[e] = tdr
        return out

    def sweep(self, composition: str, eval_set: str) -> list[tuple[float, float]]:
        return [(f, tdr) for c, f, e, tdr, _ in self.rows if c == composition and e == eval_set]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for c, f, e, tdr, tau in self.rows:
                w.writerow([c, f, e, f"{tdr:.6f}", f"{tau:.6g}"])
        return path

    def to_plot_csv(self, path) -> Path:
        """One row per real fraction, one column per (composition, eval set)."""
        path = Path(path)
        cols = sorted({(c, e) for c, _, e, _, _ in self.rows})
        fracs = sorted({f for _, f, _, _, _ in self.rows} | {f for _, f, _ in self.skipped})
        val = {(c, f, e): tdr for c, f, e, tdr, _ in self.rows}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["real_fraction"] + [f"{c}:{e}" for c, e in cols])
            for f in fracs:
                w.writerow([f] + [f"{val[(c, f, e)]:.6f}" if (c, f, e) in val else "" for c, e in cols])
        return path


def run_augmentation_experiment(real: Dataset, synthetic: Dataset, compositions=COMPOSITIONS,
                                real_fractions=REAL_FRACTIONS, eval_sets: dict | None = None, *,
                                config: DetectorConfig | None = None, fusion: FusionConfig = FusionConfig(),
                                fdr_target: float = FDR_TARGET, out_dir=None, seed: int = 0) -> ExperimentResult:
    """Train a two-branch detector per (composition, real fraction) cell and
    report TDR at ``fdr_target`` on every evaluation set.

    Cells with an identical training set share one trained detector; empty
    cells are skipped with a reason.
    """
    if real.provenance == synthetic.provenance:
        raise ExperimentError(f"real and synthetic sets share provenance {real.provenance!r}")
    if Path(real.root).resolve() == Path(synthetic.root).resolve():
        raise ExperimentError("real and synthetic sets share a root directory")
    eval_sets = eval_sets or {"real_test": real.filter(split="test")}
    config = config or DetectorConfig()
    cache = SampleCache()
    trained: dict[str, dict] = {}
    rows, skipped = [], []
    for comp in compositions:
        for frac in real_fractions:
            sets = composition_sets(comp, real, synthetic, frac, seed)
            if not sets:
                skipped.append((comp, frac, "empty training set"))
                continue
            live = any(r.is_live for d in sets for r in d)
            spoof = any(not r.is_live for d in sets for r in d)
            if not (live and spoof):
                skipped.append((comp, frac, "training set lacks live or spoof records"))
                continue
            key = _training_key(sets)
            if key not in trained:
                cell_seed = int.from_bytes(hashlib.blake2b(f"{seed}|{key}".encode(), digest_size=8).digest(), "little")
                cfg = DetectorConfig(**{**asdict(config), "seed": cell_seed % 2**31})
                det = train_two_branch(sets, cfg, cache)
                trained[key] = {name: tdr_at_fdr(score_dataset(det, ds, fusion, cache), fdr_target)
                                for name, ds in eval_sets.items()}
            for name, (tau, tdr) in trained[key].items():
                rows.append((comp, frac, name, tdr, tau))
    result = ExperimentResult(rows, skipped, len(trained))
    if out_dir is not None:
        out = Path(out_dir)
        result.to_csv(out / "augmentation_results.csv")
        result.to_plot_csv(out / "augmentation_plot.csv")
        (out / "augmentation_skipped.json").write_text(json.dumps(
            [{"composition": c, "real_fraction": f, "reason": why} for c, f, why in skipped], indent=2))
    return result
