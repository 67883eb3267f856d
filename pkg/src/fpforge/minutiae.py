"""Crossing-number minutiae extraction and corpus-level fingerprint statistics."""
from __future__ import annotations

import csv
import math
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .binarize import classical_binarize, segment_foreground
from .data import Dataset
from .errors import ExtractionError, StatsError

ENDING, BIFURCATION = "ending", "bifurcation"
MARGIN = 10
MIN_BRANCH = 5
TRACE_LENGTH = 8

# 8-neighbourhood in circular order starting north: (dy, dx)
RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


@dataclass(frozen=True)
class Minutia:
    x: int
    y: int
    theta: float
    kind: str
    quality: float


def _check_binary(binary) -> np.ndarray:
    b = np.asarray(binary)
    if b.ndim != 2:
        raise ExtractionError(f"expected a 2-D image, got shape {b.shape}")
    if b.dtype == bool:
        return b.astype(np.uint8)
    if not np.isin(b, (0, 1)).all():
        raise ExtractionError("input must be binary with values in {0, 1}")
    return b.astype(np.uint8)


def thin(binary) -> np.ndarray:
    """Zhang-Suen thinning to a one-pixel skeleton (uint8)."""
    return skeletonize(_check_binary(binary).astype(bool), method="zhang").astype(np.uint8)


def crossing_number_map(skel: np.ndarray) -> np.ndarray:
    """CN(p) = 1/2 * sum |n_i - n_(i+1)| over the circular 8-neighbourhood, on skeleton pixels."""
    s = np.pad(skel.astype(np.int16), 1)
    h, w = skel.shape
    ring = [s[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in RING]
    cn = sum(np.abs(ring[i] - ring[(i + 1) % 8]) for i in range(8)) // 2
    return np.where(skel > 0, cn, 0)


def crossing_number(skel: np.ndarray, y: int, x: int) -> int:
    vals = []
    for dy, dx in RING:
        yy, xx = y + dy, x + dx
        inside = 0 <= yy < skel.shape[0] and 0 <= xx < skel.shape[1]
        vals.append(int(skel[yy, xx]) if inside else 0)
    return sum(abs(vals[i] - vals[(i + 1) % 8]) for i in range(8)) // 2


def _neighbours(skel, y, x):
    h, w = skel.shape
    out = []
    # orthogonal first so staircase steps follow the 4-connected path
    for dy, dx in ((-1, 0), (0, 1), (1, 0), (0, -1), (-1, 1), (1, 1), (1, -1), (-1, -1)):
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w and skel[yy, xx]:
            out.append((yy, xx))
    return out


def trace(skel, cn, y, x, max_len):
    """Follow the skeleton from an ending; stop at a junction, another ending or ``max_len``.

    Returns the visited path (excluding any junction pixel) and how it ended.
    """
    path = [(y, x)]
    seen = {(y, x)}
    cur = (y, x)
    while len(path) < max_len:
        nxt = [p for p in _neighbours(skel, *cur) if p not in seen]
        if not nxt:
            return path, "end"
        p = nxt[0]
        if cn[p] >= 3:
            return path, "junction"
        if cn[p] == 1:
            path.append(p)
            return path, "end"
        path.append(p)
        seen.add(p)
        cur = p
    return path, "open"


def prune_spurs(skel: np.ndarray, min_length: int = MIN_BRANCH, passes: int = 2) -> np.ndarray:
    """Remove skeleton branches shorter than ``min_length`` that hang off a junction,
    and isolated fragments shorter than ``min_length``."""
    skel = skel.copy()
    for _ in range(passes):
        cn = crossing_number_map(skel)
        changed = False
        for y, x in zip(*np.nonzero(cn == 1)):
            if not skel[y, x]:
                continue
            path, how = trace(skel, cn, y, x, min_length)
            if how in ("junction", "end") and len(path) < min_length:
                for p in path:
                    skel[p] = 0
                changed = True
        if not changed:
            break
    return skel


def structure_tensor(image: np.ndarray, sigma: float = 4.0):
    g = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(g, axis=1)
    gy = ndimage.sobel(g, axis=0)
    jxx = ndimage.gaussian_filter(gx * gx, sigma)
    jyy = ndimage.gaussian_filter(gy * gy, sigma)
    jxy = ndimage.gaussian_filter(gx * gy, sigma)
    return jxx, jyy, jxy


def orientation_and_coherence(image: np.ndarray, sigma: float = 4.0):
    """Ridge orientation (radians, mod pi) and coherence in [0, 1]."""
    jxx, jyy, jxy = structure_tensor(image, sigma)
    # gradient direction is across ridges; ridges run perpendicular to it
    orient = np.mod(0.5 * np.arctan2(2 * jxy, jxx - jyy) + np.pi / 2, np.pi)
    tr = jxx + jyy
    coh = np.where(tr > 1e-12, np.sqrt((jxx - jyy) ** 2 + 4 * jxy**2) / np.maximum(tr, 1e-12), 0.0)
    return orient, np.clip(coh, 0.0, 1.0)


def extract_minutiae(binary, mask=None, *, margin: int = MARGIN, min_branch: int = MIN_BRANCH) -> list[Minutia]:
    """Ridge endings (CN = 1) and bifurcations (CN = 3) of a binary ridge map.

    Parameters
    ----------
    binary : array of {0, 1}
        Ridge map with ridges = 1.
    mask : bool array, optional
        Fingerprint area; minutiae closer than ``margin`` to its edge are
        dropped in addition to those near the image border.

    Minutiae are listed in raster order.  ``theta`` points from the ridge
    toward an ending; for bifurcations it is the local ridge orientation.
    ``quality`` is the local orientation coherence scaled to [0, 100].
    """
    b = _check_binary(binary)
    skel = prune_spurs(thin(b), min_branch)
    cn = crossing_number_map(skel)
    h, w = b.shape
    keep = np.zeros_like(b, dtype=bool)
    keep[margin:h - margin, margin:w - margin] = True
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        keep &= ndimage.binary_erosion(m, iterations=margin, border_value=0) if margin else m
    orient, coh = orientation_and_coherence(b)
    out = []
    for y, x in zip(*np.nonzero(((cn == 1) | (cn == 3)) & keep)):
        if cn[y, x] == 1:
            path, _ = trace(skel, cn, y, x, TRACE_LENGTH)
            ty, tx = path[-1]
            theta = math.atan2(y - ty, x - tx) if len(path) > 1 else float(orient[y, x])
            kind = ENDING
        else:
            theta, kind = float(orient[y, x]), BIFURCATION
        out.append(Minutia(int(x), int(y), float(theta), kind, float(100.0 * coh[y, x])))
    return out


def write_minutiae_csv(path, minutiae) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta", "kind", "quality"])
        for m in minutiae:
            w.writerow([m.x, m.y, f"{m.theta:.6f}", m.kind, f"{m.quality:.3f}"])
    return path


# -- corpus statistics ----------------------------------------------------

# Row labels follow the published statistics table so reports line up with it.
# The quality row holds the coherence surrogate, not a vendor score.
STAT_ROWS = (
    "Total Minutiae Count",
    "Ridge Ending Minutiae Count",
    "Ridge Bifurcation Minutiae Count",
    "Verifinger Minutiae Quality",
    "Fingerprint Area (Megapixels)",
    "Fingerprint Image Quality (NFIQ2)",
)


def minutiae_per_megapixel(mean_count: float, mean_area_mp: float) -> float:
    return mean_count / mean_area_mp if mean_area_mp > 0 else 0.0


@dataclass
class FingerprintStats:
    """Means and population standard deviations over a corpus."""

    total_count: tuple[float, float]
    ending_count: tuple[float, float]
    bifurcation_count: tuple[float, float]
    mean_quality: tuple[float, float]
    area_megapixels: tuple[float, float]
    nfiq2: tuple[float, float] = (float("nan"), float("nan"))
    n_images: int = 0
    degenerate_area: bool = False
    per_image: dict = field(default_factory=dict, repr=False)

    @property
    def minutiae_per_megapixel(self) -> float:
        return minutiae_per_megapixel(self.total_count[0], self.area_megapixels[0])

    def rows(self) -> list[tuple[str, float, float]]:
        vals = (self.total_count, self.ending_count, self.bifurcation_count,
                self.mean_quality, self.area_megapixels, self.nfiq2)
        return [(name, float(m), float(s)) for name, (m, s) in zip(STAT_ROWS, vals)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["measure", "mean", "std"])
            for name, m, s in self.rows():
                w.writerow([name, fmt(m), fmt(s)])
            w.writerow(["Minutiae per Megapixel", f"{self.minutiae_per_megapixel:.6g}", ""])
        return path


def fmt(v: float) -> str:
    """CSV cell; unavailable measures (NaN) are left blank."""
    return f"{v:.6g}" if math.isfinite(v) else ""


def _mean_std(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (float("nan"), float("nan"))
    return (float(v.mean()), float(v.std()))


def nfiq2_scores(paths, executable: str = "nfiq2") -> list[float] | None:
    """Scores from an external NFIQ2 binary, or None when it is not installed."""
    exe = shutil.which(executable)
    if exe is None:
        return None
    scores = []
    for p in paths:
        res = subprocess.run([exe, str(p)], capture_output=True, text=True, check=False)
        nums = re.findall(r"-?\d+(?:\.\d+)?", res.stdout)
        scores.append(float(nums[-1]) if res.returncode == 0 and nums else float("nan"))
    return scores


def _ridge_map(binarizer, gray) -> np.ndarray:
    out = np.asarray(binarizer(gray))
    if out.dtype != np.uint8 and not np.isin(out, (0, 1)).all():
        out = out >= 0.5
    return out.astype(np.uint8)


def fingerprint_stats(dataset: Dataset, binarizer: Callable | None = None, *,
                      nfiq2: str | None = "nfiq2") -> FingerprintStats:
    """Minutiae counts, quality and fingerprint area over every image of ``dataset``.

    ``binarizer`` maps a grayscale image to a ridge map (default: the
    classical binarizer; a trained autoencoder's soft output is thresholded
    at 0.5).  NFIQ2 is reported only when the external tool is available.
    """
    if len(dataset) == 0:
        raise StatsError("dataset is empty")
    binarizer = binarizer or classical_binarize
    totals, ends, bifs, areas, qualities = [], [], [], [], []
    for r in dataset:
        gray = dataset.load_image(r)
        mask = segment_foreground(gray)
        ridge = _ridge_map(binarizer, gray) * mask
        mins = extract_minutiae(ridge, mask=mask)
        n_end = sum(m.kind == ENDING for m in mins)
        ends.append(n_end)
        bifs.append(len(mins) - n_end)
        totals.append(len(mins))
        areas.append(mask.sum() / 1e6)
        qualities.extend(m.quality for m in mins)
    scores = nfiq2_scores([dataset.path_of(r) for r in dataset], nfiq2) if nfiq2 else None
    stats = FingerprintStats(
        total_count=_mean_std(totals),
        ending_count=_mean_std(ends),
        bifurcation_count=_mean_std(bifs),
        mean_quality=_mean_std(qualities) if qualities else (0.0, 0.0),
        area_megapixels=_mean_std(areas),
        nfiq2=_mean_std(scores) if scores else (float("nan"), float("nan")),
        n_images=len(dataset),
        per_image={"total": totals, "ending": ends, "bifurcation": bifs, "area_mp": areas},
    )
    stats.degenerate_area = stats.area_megapixels[0] == 0
    return stats
