"""Procedural fingerprint-like corpora for desk-scale training and tests.

Ridge patterns are grown from noise by repeated orientation-selective Gabor
filtering, which yields ridge endings and bifurcations much like real prints.
Grayscale "captures" are rendered with simple per-material texture models.
None of this is meant to be realistic; it only has to exercise the pipeline.
"""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from .data import Dataset, ImpressionRecord, write_image, write_manifest
from .warp import DeformationBasis, random_impression, synthesize_basis

N_ORIENTATIONS = 12


def orientation_field(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth ridge-orientation angles (radians, mod pi) with one loop-like core."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    theta = rng.uniform(0, np.pi)
    for _ in range(3):
        kx, ky = rng.uniform(0.5, 2.0, size=2)
        theta = theta + rng.normal(0, 0.35) * np.cos(np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
    cx, cy = rng.uniform(0.35, 0.65, size=2)
    core = 0.5 * np.arctan2(yy - cy, xx - cx)
    return np.mod(theta + core, np.pi)


def _gabor(theta: float, period: float, sigma: float) -> np.ndarray:
    r = int(np.ceil(2.5 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    # wave runs across the ridge direction
    u = -x * np.sin(theta) + y * np.cos(theta)
    k = np.exp(-(x**2 + y**2) / (2 * sigma**2)) * np.cos(2 * np.pi * u / period)
    return k - k.mean()


def ridge_mask(size: int = 256, seed: int = 0, period: float = 9.0, n_iter: int = 6,
               foreground: bool = True) -> np.ndarray:
    """Binary ridge map (ridges = 1) of a random toy finger."""
    rng = np.random.default_rng(seed)
    theta = orientation_field(size, rng)
    bins = np.round(theta / np.pi * N_ORIENTATIONS).astype(int) % N_ORIENTATIONS
    kernels = [_gabor(np.pi * k / N_ORIENTATIONS, period, 0.45 * period) for k in range(N_ORIENTATIONS)]
    f = rng.normal(size=(size, size))
    for _ in range(n_iter):
        out = np.zeros_like(f)
        for k, ker in enumerate(kernels):
            sel = bins == k
            if sel.any():
                out[sel] = fftconvolve(f, ker, mode="same")[sel]
        f = np.tanh(3.0 * out / (np.std(out) + 1e-12))
    mask = (f > 0).astype(np.uint8)
    if foreground:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = size / 2 + rng.normal(0, size * 0.02, size=2)
        ay, ax = size * rng.uniform(0.36, 0.44), size * rng.uniform(0.28, 0.36)
        mask[((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 > 1.0] = 0
    return mask


def master_image(size: int = 256, seed: int = 0, **kw) -> np.ndarray:
    """Toy binary master print in image polarity (ridges 0, background 1)."""
    return 1.0 - ridge_mask(size, seed, **kw).astype(np.float64)


def _material_seed(material: str) -> int:
    return zlib.crc32(material.encode())


def render_toy(binary_image, material: str = "live", rng=None) -> np.ndarray:
    """Grayscale capture of an image-polarity binary print.

    Live renders are sharp and high-contrast; spoof renders are lower
    contrast with blotchy, speckled texture whose details vary per material.
    """
    rng = np.random.default_rng(rng)
    ridge = 1.0 - np.asarray(binary_image, dtype=np.float64)
    size = ridge.shape
    contact = ndimage.binary_dilation(ridge > 0.5, iterations=4)
    contact = ndimage.binary_fill_holes(ndimage.binary_closing(contact, iterations=4))
    if material == "live":
        ink = ndimage.gaussian_filter(ridge, 0.8)
        gray = 1.0 - 0.75 * ink + rng.normal(0, 0.03, size)
    else:
        m = np.random.default_rng(_material_seed(material))
        contrast = m.uniform(0.35, 0.55)
        blur = m.uniform(1.2, 2.0)
        ink = ndimage.gaussian_filter(ridge, blur)
        blotch = ndimage.gaussian_filter(rng.normal(size=size), m.uniform(3, 8))
        blotch = blotch / (np.std(blotch) + 1e-12)
        gray = 1.0 - contrast * ink * (1.0 + 0.35 * blotch)
        speck = rng.random(size) < m.uniform(0.01, 0.03)
        gray[speck] -= 0.3
        gray += rng.normal(0, 0.05, size)
    gray = np.where(contact, gray, 1.0)
    return np.clip(gray, 0.0, 1.0)


def make_corpus(root, n_fingers: int, n_impressions: int = 1, materials=("live",), *,
                size: int = 128, seed: int = 0, split: str = "train", basis: DeformationBasis | None = None,
                finger_prefix: str = "toy", provenance: str = "real", period: float = 9.0) -> Dataset:
    """Write a toy corpus to ``root`` and return it as a :class:`Dataset`.

    Every material is rendered from the same warped binary of an impression,
    so live and spoof images of one finger share ridge structure.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    basis = basis or synthesize_basis(8, 8, 4, seed=seed, rms_px=size / 128.0)
    records = []
    for f in range(n_fingers):
        master = master_image(size, seed=int(rng.integers(2**31)), period=period)
        fid = f"{finger_prefix}{f:04d}"
        for i in range(n_impressions):
            warped = master if n_impressions == 1 else random_impression(master, basis, rng)[0]
            for mat in materials:
                gray = render_toy(warped, mat, rng)
                rel = f"{mat}/{fid}_{i}.png"
                write_image(root / rel, gray)
                records.append(ImpressionRecord(fid, i, mat, mat == "live", split, rel, size, size))
    write_manifest(root / "manifest.csv", records)
    return Dataset(root, records, provenance=provenance)
