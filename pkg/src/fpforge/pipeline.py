"""End-to-end generation and the evaluation report bundle.

Seeds are split per (finger, impression, material) by hashing them together
with the root seed, so any image can be regenerated on its own and adding
fingers never changes existing ones.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (MANIFEST_NAME, Dataset, ImpressionRecord, load_dataset, normalize_material, read_image,
                   to_uint8, write_image, write_manifest)
from .errors import ConfigError, ForgeError
from .masterprint import MASTER_SIZE, GanParams, generate_masterprint, sample_identity_latent
from .match import ProjectionEmbedder, leakage_check, load_embedder, score_distributions, tar_at_far, write_scores_csv
from .minutiae import STAT_ROWS, fingerprint_stats, fmt
from .render import RendererParams, load_lineage, render_texture, sample_texture_latent
from .warp import DeformationBasis, Pose, apply_warp, compose_distortion_field, sample_pose_and_coeffs, synthesize_basis

logger = logging.getLogger(__name__)

BINARY_DIR = "binaries"
REPORT_ARTIFACTS = ("fp_stats.csv", "scores.csv", "tar_at_far.csv", "leakage.json")
FAR_TARGETS = (0.0001, 0.001, 0.01)


def derive_seed(root_seed: int, finger: int, impression: int = -1, material: str = "") -> int:
    """Stable 64-bit seed for one (finger, impression, material) triple."""
    msg = f"{int(root_seed)}|{int(finger)}|{int(impression)}|{material}".encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


def _load_toml(path) -> dict:
    import tomli

    with open(path, "rb") as fh:
        return tomli.load(fh)


@dataclass
class GenerationConfig:
    n_fingers: int
    impressions_per_finger: int
    materials: list
    output_root: str
    masterprint: str
    renderers: dict = field(default_factory=dict)  # material -> checkpoint
    lineage: str | None = None  # alternative to ``renderers``
    basis: str | None = None
    root_seed: int = 0
    translation_scale: float | None = None  # default: master size / 256

    def __post_init__(self):
        if self.n_fingers < 1 or self.impressions_per_finger < 1:
            raise ConfigError("n_fingers and impressions_per_finger must be at least 1")
        if not self.materials:
            raise ConfigError("at least one material is required")
        self.materials = [normalize_material(m) for m in self.materials]

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d.get("generate", d))
        ck = d.pop("checkpoints", {})
        d.setdefault("masterprint", ck.get("masterprint"))
        d.setdefault("renderers", ck.get("renderers", {}))
        d.setdefault("lineage", ck.get("lineage"))
        d.setdefault("basis", ck.get("basis"))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad generation config: {exc}") from exc

    @classmethod
    def from_toml(cls, path) -> "GenerationConfig":
        return cls.from_dict(_load_toml(path))

    def renderer_paths(self) -> dict:
        paths = {normalize_material(k): Path(v) for k, v in self.renderers.items()}
        if self.lineage:
            lin_path = Path(self.lineage)
            for name, entry in load_lineage(lin_path).items():
                paths.setdefault(name, lin_path.parent / entry["checkpoint"])
        return paths


def _check_file(path, what) -> Path:
    if path is None or not Path(path).is_file():
        raise ConfigError(f"missing {what} checkpoint: {path}")
    return Path(path)


def load_stage_params(config: GenerationConfig):
    gan = GanParams.load(_check_file(config.masterprint, "master-print"))
    paths = config.renderer_paths()
    renderers = {}
    for m in config.materials:
        renderers[m] = RendererParams.load(_check_file(paths.get(m), f"renderer[{m}]"))
    size = gan.generator.size
    for m, r in renderers.items():
        if r.in_size != size:
            raise ConfigError(f"renderer[{m}] expects {r.in_size}px binaries, master prints are {size}px")
    if config.basis:
        basis = DeformationBasis.load(_check_file(config.basis, "deformation basis"))
    else:
        basis = synthesize_basis(seed=0, rms_px=4.0 * size / MASTER_SIZE)
    return gan, renderers, basis


def finger_id(f: int) -> str:
    return f"syn{f:05d}"


def binary_path(root, fid: str, impression: int) -> Path:
    return Path(root) / BINARY_DIR / f"{fid}_{impression}.png"


def warp_impression(master: np.ndarray, basis: DeformationBasis, seed: int, translation_scale: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pose, c = sample_pose_and_coeffs(rng, basis)
    pose = Pose(pose.rotation, pose.tx * translation_scale, pose.ty * translation_scale)
    h, w = master.shape
    return apply_warp(master, pose, compose_distortion_field(basis, c, w, h))


def generate_dataset(config: GenerationConfig) -> Dataset:
    """Render ``n_fingers * impressions_per_finger * len(materials)`` images.

    Every impression's warped binary is written to ``binaries/`` and all
    materials of that impression are rendered from it.  Files that already
    exist are kept, so an interrupted run can simply be repeated.
    """
    gan, renderers, basis = load_stage_params(config)
    root = Path(config.output_root)
    size = gan.generator.size
    scale = config.translation_scale if config.translation_scale is not None else size / MASTER_SIZE
    records = []
    for f in range(config.n_fingers):
        fid = finger_id(f)
        master = None
        for i in range(config.impressions_per_finger):
            bpath = binary_path(root, fid, i)
            outs = {m: root / m / f"{fid}_{i}.png" for m in config.materials}
            if not bpath.exists() or not all(p.exists() for p in outs.values()):
                if bpath.exists():
                    warped = read_image(bpath)
                else:
                    if master is None:
                        z = sample_identity_latent(derive_seed(config.root_seed, f, -1, "identity"),
                                                   gan.generator.latent_dim)
                        # soft map: warping interpolates it, nothing is hardened before export
                        master = generate_masterprint(gan, z).image
                    warped = warp_impression(master, basis, derive_seed(config.root_seed, f, i, "warp"), scale)
                    # render from exactly what is stored
                    warped = to_uint8(warped) / 255.0
                    write_image(bpath, warped)
                for m, p in outs.items():
                    if p.exists():
                        continue
                    z = sample_texture_latent(derive_seed(config.root_seed, f, i, m), renderers[m].generator.z_dim)
                    write_image(p, render_texture(renderers[m], warped, z))
            out_size = renderers[config.materials[0]].generator.out_size
            for m, p in outs.items():
                records.append(ImpressionRecord(fid, i, m, m == "live", "train", str(p.relative_to(root)),
                                                out_size, out_size))
    write_manifest(root / MANIFEST_NAME, records)
    return Dataset(root, records, provenance="synthetic")


# -- evaluation report ----------------------------------------------------------

@dataclass
class EvalConfig:
    synthetic_root: str
    real_root: str
    out_dir: str
    embedder: str | None = None  # checkpoint; default: projection embedder
    leakage_threshold: float = 0.9
    far_targets: list = field(default_factory=lambda: list(FAR_TARGETS))
    imposter_cap: int = 100_000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        try:
            return cls(**dict(d.get("report", d)))
        except TypeError as exc:
            raise ConfigError(f"bad report config: {exc}") from exc


def _write_failure(path: Path, message: str) -> None:
    if path.suffix == ".json":
        path.write_text(json.dumps({"error": message}, indent=2))
    else:
        path.write_text("error\n" + json.dumps(message) + "\n")


def _stats_step(real, synthetic, path):
    sets = {"real": fingerprint_stats(real), "synthetic": fingerprint_stats(synthetic)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure"] + [f"{n}_{k}" for n in sets for k in ("mean", "std")])
        rows = {n: s.rows() for n, s in sets.items()}
        for j, name in enumerate(STAT_ROWS):
            w.writerow([name] + [fmt(v) for n in sets for v in rows[n][j][1:]])
        w.writerow(["Minutiae per Megapixel"] + [x for s in sets.values() for x in (fmt(s.minutiae_per_megapixel), "")])
    return {n: {"n_images": s.n_images, "minutiae_per_megapixel": s.minutiae_per_megapixel} for n, s in sets.items()}


def _score_sets(real, synthetic, embedder, cfg):
    sets = {"real/live-live": score_distributions(real, embedder, "live-live", imposter_cap=cfg.imposter_cap,
                                                  seed=cfg.seed),
            "synthetic/live-live": score_distributions(synthetic, embedder, "live-live",
                                                       imposter_cap=cfg.imposter_cap, seed=cfg.seed)}
    for m in synthetic.materials:
        if m != "live":
            sets[f"synthetic/live-{m}"] = score_distributions(synthetic, embedder, "live-spoof", material=m,
                                                              imposter_cap=cfg.imposter_cap, seed=cfg.seed)
    return sets


def replicate_eval_protocol(config: EvalConfig) -> dict:
    """Fingerprint statistics, match-score distributions, TAR@FAR and a leakage
    audit, written to ``out_dir`` with a ``summary.json`` index.

    A failing step leaves its artifact with an error marker and is recorded
    in the summary; the other steps still run.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"artifacts": list(REPORT_ARTIFACTS), "steps": {}}
    try:
        real = load_dataset(config.real_root, provenance="real")
        synthetic = load_dataset(config.synthetic_root, provenance="synthetic")
    except ForgeError as exc:
        for name in REPORT_ARTIFACTS:
            _write_failure(out / name, str(exc))
            summary["steps"][name] = {"status": "failed", "error": str(exc)}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return summary
    embedder = load_embedder(config.embedder) if config.embedder else ProjectionEmbedder(seed=config.seed)
    score_sets: dict = {}

    def run(name, fn):
        try:
            info = fn()
            summary["steps"][name] = {"status": "ok", **(info or {})}
        except (ForgeError, ValueError) as exc:
            logger.warning("report step %s failed: %s", name, exc)
            _write_failure(out / name, str(exc))
            summary["steps"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    run("fp_stats.csv", lambda: _stats_step(real, synthetic, out / "fp_stats.csv"))

    def scores():
        score_sets.update(_score_sets(real, synthetic, embedder, config))
        write_scores_csv(out / "scores.csv", score_sets)
        return {"sets": {k: v.counts() for k, v in score_sets.items()}}

    run("scores.csv", scores)

    def tars():
        if not score_sets:
            raise ValueError("no score distributions available")
        with open(out / "tar_at_far.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set", "far", "threshold", "tar"])
            for name, s in score_sets.items():
                for far, tau, tar in tar_at_far(s, config.far_targets):
                    w.writerow([name, far, repr(tau), repr(tar)])
        return None

    run("tar_at_far.csv", tars)

    def leak():
        rep = leakage_check(synthetic, real.filter(split="train"), embedder, config.leakage_threshold)
        rep.to_json(out / "leakage.json")
        return {"flagged_fingers": rep.flagged_fingers, "total_comparisons": rep.total_comparisons}

    run("leakage.json", leak)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return summary


def config_dict(config) -> dict:
    return asdict(config)

