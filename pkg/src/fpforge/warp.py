"""Rigid pose and statistical non-linear deformation of master prints.

A deformation basis is a PCA-style model of displacement fields on a coarse
control grid: a mean field plus ``t`` orthonormal eigen-fields with their
eigenvalues.  A distortion is ``mean + sum_k coef_k * sqrt(eigval_k) * mode_k``,
bilinearly upsampled to the image resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.interpolate import RBFInterpolator

from .errors import BasisError, PoseError, WarpError

ROTATION_RANGE = 30.0  # degrees
TRANSLATION_RANGE = 25.0  # pixels
COEFF_STD = 0.66
N_ACTIVE_COEFFS = 2
BACKGROUND = 1.0
ORDERS = ("pose_then_deform", "deform_then_pose")


@dataclass(frozen=True)
class Pose:
    """Rotation (degrees, counter-clockwise as displayed) and translation (pixels).

    ``strict=False`` lifts the sampling-range check, e.g. for quarter-turn
    rotations in tests.
    """

    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    strict: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if not self.strict:
            return
        if abs(self.rotation) > ROTATION_RANGE:
            raise PoseError(f"rotation {self.rotation} outside [-{ROTATION_RANGE}, {ROTATION_RANGE}]")
        if abs(self.tx) > TRANSLATION_RANGE or abs(self.ty) > TRANSLATION_RANGE:
            raise PoseError(f"translation ({self.tx}, {self.ty}) outside +/-{TRANSLATION_RANGE}")


@dataclass(frozen=True, eq=False)
class DeformationBasis:
    """Mean field ``(2, gh, gw)``, eigen-fields ``(t, 2, gh, gw)``, eigenvalues ``(t,)``.

    Channel 0 holds x displacements, channel 1 y displacements, in pixels of
    the target image.
    """

    mean_field: np.ndarray
    eigen_fields: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        for name in ("mean_field", "eigen_fields", "eigenvalues"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def t(self) -> int:
        return self.eigen_fields.shape[0]

    @property
    def grid_h(self) -> int:
        return self.mean_field.shape[1]

    @property
    def grid_w(self) -> int:
        return self.mean_field.shape[2]

    def validate(self, tol: float = 1e-6) -> None:
        m, e, lam = self.mean_field, self.eigen_fields, self.eigenvalues
        if m.ndim != 3 or m.shape[0] != 2:
            raise BasisError(f"mean field must be (2, gh, gw), got {m.shape}")
        if e.ndim != 4 or e.shape[1:] != m.shape:
            raise BasisError(f"eigen fields must be (t, {m.shape}), got {e.shape}")
        if e.shape[0] < 2:
            raise BasisError("basis needs t >= 2 eigen-fields")
        if lam.shape != (e.shape[0],):
            raise BasisError("one eigenvalue per eigen-field required")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(e)) and np.all(np.isfinite(lam))):
            raise BasisError("basis contains non-finite values")
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise BasisError("eigenvalues must be non-negative and non-increasing")
        flat = e.reshape(e.shape[0], -1)
        gram = flat @ flat.T
        if np.max(np.abs(gram - np.eye(len(flat)))) > tol:
            raise BasisError("eigen-fields are not orthonormal")

    def grid_field(self, coefficients) -> np.ndarray:
        c = np.asarray(coefficients, dtype=np.float64)
        if c.shape != (self.t,):
            raise BasisError(f"expected {self.t} coefficients, got {c.shape}")
        scaled = c * np.sqrt(self.eigenvalues)
        return self.mean_field + np.tensordot(scaled, self.eigen_fields, axes=1)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                grid_w=self.grid_w,
                grid_h=self.grid_h,
                t=self.t,
                mean_field=self.mean_field,
                eigen_fields=self.eigen_fields,
                eigenvalues=self.eigenvalues,
            )
        return path

    @classmethod
    def load(cls, path) -> "DeformationBasis":
        with np.load(path) as z:
            missing = {"grid_w", "grid_h", "t", "mean_field", "eigen_fields", "eigenvalues"} - set(z.files)
            if missing:
                raise BasisError(f"basis file lacks {sorted(missing)}")
            basis = cls(z["mean_field"], z["eigen_fields"], z["eigenvalues"])
            if (basis.grid_w, basis.grid_h, basis.t) != (int(z["grid_w"]), int(z["grid_h"]), int(z["t"])):
                raise BasisError("basis header disagrees with array shapes")
        return basis

    def summary(self) -> dict:
        flat = self.eigen_fields.reshape(self.t, -1)
        return {
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "t": self.t,
            "eigenvalues": self.eigenvalues.tolist(),
            "mean_field_max_px": float(np.max(np.hypot(*self.mean_field))),
            "orthonormality_error": float(np.max(np.abs(flat @ flat.T - np.eye(self.t)))),
        }


@dataclass(frozen=True, eq=False)
class DistortionSample:
    coefficients: np.ndarray
    field: np.ndarray  # (2, H, W) dense displacement in pixels


MAX_CYCLES = 3


def _cosine_atoms(grid_w: int, grid_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Separable cosine atoms up to MAX_CYCLES cycles per side, with frequency weights."""
    ks = np.arange(2 * MAX_CYCLES + 1)  # cos(pi k u), k = 2*cycles
    u = np.linspace(0.0, 1.0, grid_w)
    v = np.linspace(0.0, 1.0, grid_h)
    cu = np.cos(np.pi * ks[:, None] * u[None, :])
    cv = np.cos(np.pi * ks[:, None] * v[None, :])
    atoms = np.einsum("lv,ku->klvu", cv, cu).reshape(len(ks) ** 2, grid_h, grid_w)
    kk, ll = np.meshgrid(ks, ks, indexing="ij")
    weights = 1.0 / (1.0 + kk**2 + ll**2).ravel()
    return atoms, weights


def _random_smooth_field(rng, atoms, weights) -> np.ndarray:
    a = rng.normal(size=(2, len(atoms))) * np.sqrt(weights)
    return np.tensordot(a, atoms, axes=1)


def _gram_schmidt(vectors: list[np.ndarray], candidate: np.ndarray) -> np.ndarray | None:
    v = candidate.copy()
    # two passes keep the basis orthonormal to machine precision
    for _ in range(2):
        for q in vectors:
            v -= (q @ v) * q
    n = np.linalg.norm(v)
    if n < 1e-8 * max(np.linalg.norm(candidate), 1e-300):
        return None
    return v / n


def synthesize_basis(
    grid_w: int = 16,
    grid_h: int = 16,
    t: int = 8,
    seed: int = 0,
    *,
    ratio: float = 0.5,
    rms_px: float = 4.0,
    mean_max_px: float = 1.0,
) -> DeformationBasis:
    """Random smooth stand-in for a learned distortion basis.

    Eigen-fields are random low-frequency cosine series (at most three cycles
    per side) orthonormalized by Gram-Schmidt.  Eigenvalues form the geometric
    sequence ``top * ratio**k`` with the leading eigenvalue ``top`` chosen so
    that its scaled mode has an RMS displacement of ``rms_px``.  The mean
    field is a smooth field whose largest vector has length ``mean_max_px``.
    """
    if t < 2:
        raise BasisError("t must be >= 2")
    if grid_w < 4 or grid_h < 4:
        raise BasisError("control grid must be at least 4x4")
    if not 0.0 < ratio < 1.0:
        raise BasisError("ratio must lie in (0, 1)")
    if not 0.0 <= mean_max_px <= 2.0:
        raise BasisError("mean field magnitude is limited to 2 px")
    rng = np.random.default_rng(seed)
    atoms, weights = _cosine_atoms(grid_w, grid_h)
    dim = 2 * np.linalg.matrix_rank(atoms.reshape(len(atoms), -1))
    if t > dim:
        raise BasisError(f"t={t} exceeds the {dim}-dimensional smooth field space")

    fields: list[np.ndarray] = []
    tries = 0
    while len(fields) < t:
        tries += 1
        if tries > 50 * t:
            raise BasisError("could not draw enough independent fields")
        q = _gram_schmidt(fields, _random_smooth_field(rng, atoms, weights).ravel())
        if q is not None:
            fields.append(q)
    eigen_fields = np.stack(fields).reshape(t, 2, grid_h, grid_w)

    n_entries = 2 * grid_h * grid_w
    eigenvalues = rms_px**2 * n_entries * ratio ** np.arange(t)

    mean = _random_smooth_field(rng, atoms, weights)
    peak = np.max(np.hypot(mean[0], mean[1]))
    mean = mean * (mean_max_px / peak) if peak > 0 else mean
    return DeformationBasis(mean, eigen_fields, eigenvalues)


def sample_pose_and_coeffs(rng, basis: DeformationBasis, sigma_c: float = COEFF_STD,
                           n_active: int = N_ACTIVE_COEFFS):
    """Draw a uniform pose and coefficients for the ``n_active`` leading eigen-fields.

    ``rng`` is a ``numpy.random.Generator`` (or an int seed).  Only
    ``uniform`` and ``normal`` are called on it.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    rotation = float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE))
    tx = float(rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE))
    ty = float(rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE))
    c = np.zeros(basis.t)
    k = min(n_active, basis.t)
    c[:k] = np.asarray(rng.normal(0.0, sigma_c, size=k), dtype=np.float64)
    return Pose(rotation, tx, ty), c


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix of corner-aligned linear interpolation weights."""
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    w[rows, i0] = 1.0 - frac
    w[rows, i0 + 1] += frac
    return w


def upsample_field(grid_field: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    wy = bilinear_weights(grid_field.shape[1], out_h)
    wx = bilinear_weights(grid_field.shape[2], out_w)
    return np.einsum("yi,cij,xj->cyx", wy, grid_field, wx)


def compose_distortion_field(basis: DeformationBasis, c, out_w: int, out_h: int) -> DistortionSample:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (basis.t,):
        raise BasisError(f"expected {basis.t} coefficients, got shape {c.shape}")
    dense = upsample_field(basis.grid_field(c), out_w, out_h)
    return DistortionSample(coefficients=c.copy(), field=dense)


def zero_distortion(height: int, width: int) -> DistortionSample:
    return DistortionSample(np.zeros(0), np.zeros((2, height, width)))


def _inverse_pose(xx, yy, pose: Pose, h: int, w: int):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = np.deg2rad(pose.rotation)
    cos, sin = np.cos(th), np.sin(th)
    # forward map (y axis down): x' = cx + cos*dx + sin*dy + tx ; y' = cy - sin*dx + cos*dy + ty
    dx = xx - pose.tx - cx
    dy = yy - pose.ty - cy
    return cx + cos * dx - sin * dy, cy + sin * dx + cos * dy


def _snap(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < tol, r, v)


def apply_warp(image, pose: Pose, distortion: DistortionSample | None = None, *,
               fill: float = BACKGROUND, order: str = "pose_then_deform") -> np.ndarray:
    """Rotate about the image center, translate, then displace by the field.

    Content at output pixel ``p`` is taken from ``p - d(p)`` of the posed
    image, so a positive displacement moves content in the positive
    direction, as translation does.  Samples falling outside the source are
    filled with ``fill`` (white background).  ``order="deform_then_pose"``
    swaps the two steps.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise WarpError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if distortion is None:
        distortion = zero_distortion(h, w)
    d = np.asarray(distortion.field, dtype=np.float64)
    if d.shape != (2, h, w):
        raise WarpError(f"distortion field {d.shape} does not match image {(h, w)}")
    if order not in ORDERS:
        raise WarpError(f"order must be one of {ORDERS}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if order == "pose_then_deform":
        sx, sy = _inverse_pose(xx - d[0], yy - d[1], pose, h, w)
    else:
        qx, qy = _inverse_pose(xx, yy, pose, h, w)
        dx = ndimage.map_coordinates(d[0], [qy, qx], order=1, mode="nearest")
        dy = ndimage.map_coordinates(d[1], [qy, qx], order=1, mode="nearest")
        sx, sy = qx - dx, qy - dy
    # trig round-off (cos 90 deg ~ 6e-17) must not push border samples outside the image
    sx, sy = _snap(sx), _snap(sy)
    out = ndimage.map_coordinates(image, [sy, sx], order=1, mode="constant", cval=fill)
    return np.clip(out, 0.0, 1.0)


def random_impression(master, basis: DeformationBasis, rng, sigma_c: float = COEFF_STD,
                      order: str = "pose_then_deform"):
    """One realistic impression of ``master``: returns ``(warped, pose, distortion)``."""
    master = np.asarray(master, dtype=np.float64)
    pose, c = sample_pose_and_coeffs(rng, basis, sigma_c)
    h, w = master.shape
    dist = compose_distortion_field(basis, c, w, h)
    return apply_warp(master, pose, dist, order=order), pose, dist


# -- external bases -------------------------------------------------------

def tps_grid_field(src_points, dst_points, grid_w: int, grid_h: int, width: int, height: int) -> np.ndarray:
    """Thin-plate-spline displacement ``dst - src`` evaluated on the control grid.

    Points are ``(N, 2)`` arrays of ``(x, y)`` pixel coordinates in an image of
    ``width x height``.  Returns a ``(2, grid_h, grid_w)`` field.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 3:
        raise BasisError("need matching (N>=3, 2) landmark arrays")
    tps = RBFInterpolator(src, dst - src, kernel="thin_plate_spline")
    gx = np.linspace(0, width - 1, grid_w)
    gy = np.linspace(0, height - 1, grid_h)
    X, Y = np.meshgrid(gx, gy)
    disp = tps(np.column_stack([X.ravel(), Y.ravel()]))
    return disp.T.reshape(2, grid_h, grid_w)


def basis_from_fields(fields, t: int) -> DeformationBasis:
    """PCA of a stack of ``(n, 2, gh, gw)`` displacement fields."""
    f = np.asarray(fields, dtype=np.float64)
    if f.ndim != 4 or f.shape[1] != 2:
        raise BasisError("fields must be (n, 2, gh, gw)")
    n = f.shape[0]
    if t < 2 or t > n - 1:
        raise BasisError(f"need 2 <= t <= n-1 (n={n})")
    X = f.reshape(n, -1)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    eigenvalues = s[:t] ** 2 / (n - 1)
    return DeformationBasis(mean.reshape(f.shape[1:]), vt[:t].reshape((t,) + f.shape[1:]), eigenvalues)


def basis_from_landmark_pairs(pairs, t: int, grid_w: int = 16, grid_h: int = 16,
                              width: int = 512, height: int = 512) -> DeformationBasis:
    """Fit a basis to TPS fields estimated from ``(src, dst)`` landmark pairs."""
    fields = [tps_grid_field(s, d, grid_w, grid_h, width, height) for s, d in pairs]
    return basis_from_fields(np.stack(fields), t)
