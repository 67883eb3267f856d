"""Small torch helpers: seeding, checkpoint containers, array/tensor plumbing."""
from __future__ import annotations

import hashlib
import random
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParamsError

CHECKPOINT_FORMAT = 1


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def params_digest(*modules: torch.nn.Module) -> str:
    """Stable hex digest of module weights."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, arch: dict, modules: dict, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: architecture hyperparameters plus weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "arch": dict(arch),
        "state": {k: m.state_dict() for k, m in modules.items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, kind: str) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ParamsError(f"{path}: not a checkpoint container")
    if payload["kind"] != kind:
        raise ParamsError(f"{path}: expected a {kind!r} checkpoint, found {payload['kind']!r}")
    return payload


def load_state(module: torch.nn.Module, state: dict) -> None:
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise ParamsError(f"weights do not fit the recorded architecture: {exc}") from exc


def as_batch(x) -> tuple[torch.Tensor, bool, tuple]:
    """Coerce a 2-D/3-D/4-D array or tensor to ``(N, 1, H, W)`` float32.

    Returns the tensor, whether the input was a numpy array, and the input shape.
    """
    is_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float32)) if is_numpy else x
    shape = tuple(t.shape)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    elif t.ndim != 4:
        raise ValueError(f"expected 2-D to 4-D input, got shape {shape}")
    return t, is_numpy, shape


def restore_shape(t: torch.Tensor, is_numpy: bool, shape: tuple):
    t = t.reshape(shape)
    return t.detach().cpu().numpy().astype(np.float64) if is_numpy else t


def resize(t: torch.Tensor, size: int) -> torch.Tensor:
    if t.shape[-1] == size and t.shape[-2] == size:
        return t
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def write_loss_log(path, columns: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.8g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return path
