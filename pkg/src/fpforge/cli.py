"""``forge`` command line.

Every subcommand prints a JSON result on stdout and exits 0; failures print
``{"error": <code>, "message": ...}`` on stderr and exit 1 (2 for usage
errors).  Stage settings come from an optional TOML file whose sections are
named after the stage (``[masterprint]``, ``[binarizer]``, ``[renderer]``,
``[detector]``, ``[generate]``, ``[report]``, ``[experiment]``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import binarize as bz
from . import data, detector, masterprint, match, minutiae, pipeline, render, warp
from .errors import ConfigError, ForgeError


def _toml(path) -> dict:
    if not path:
        return {}
    try:
        return pipeline._load_toml(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except Exception as exc:  # tomli.TOMLDecodeError
        raise ConfigError(f"{path}: {exc}") from exc


def _make(cls, section: dict | None, **overrides):
    """Dataclass from a config section plus non-None CLI overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = dict(section or {})
    unknown = set(kw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if cls is render.RendererConfig and isinstance(kw.get("weights"), dict):
        kw["weights"] = render.LossWeights(**kw["weights"])
    return cls(**kw)


def _dataset(path, provenance="real") -> data.Dataset:
    p = Path(path)
    if p.is_file():
        return data.load_dataset(p.parent, manifest=p, provenance=provenance)
    return data.load_dataset(p, provenance=provenance)


def _embedder(path):
    return match.load_embedder(path) if path else match.ProjectionEmbedder()


# -- handlers -------------------------------------------------------------------

def cmd_dataset(args, cfg):
    if args.action == "validate":
        ds = _dataset(args.path)
        return {"records": len(ds), "materials": ds.materials, "fingers": len(ds.finger_ids)}
    if args.action == "import":
        adapter = data.LivDetAdapter.from_config(cfg.get("dataset", {}).get("adapter", {}))
        ds = data.import_dataset(args.path, adapter, args.manifest)
        return {"records": len(ds), "manifest": str(args.manifest or Path(args.path) / data.MANIFEST_NAME)}
    if args.out is None:
        raise ConfigError("dataset export needs --out")
    return {"manifest": str(data.export_dataset(_dataset(args.path), args.out))}


def cmd_basis(args, cfg):
    if args.action == "synth":
        if args.out is None:
            raise ConfigError("basis synth needs --out")
        b = warp.synthesize_basis(args.grid, args.grid, args.t, seed=args.seed, rms_px=args.rms_px)
        b.save(args.out)
        return {"out": args.out, **b.summary()}
    return warp.DeformationBasis.load(args.path).summary()


def cmd_train(args, cfg):
    stage = args.stage
    if stage == "masterprint":
        conf = _make(masterprint.GanConfig, cfg.get("masterprint"), steps=args.steps, seed=args.seed,
                     loss_log=args.loss_log)
        init = masterprint.GanParams.load(args.init) if args.init else None
        p = masterprint.train_masterprint_gan(_dataset(args.data).filter(is_live=True), conf, init)
        p.save(args.out)
        return {"out": args.out, "steps": p.step, "final_loss_D": p.losses[-1][2] if p.losses else None}
    if stage == "binarizer":
        conf = _make(bz.BinarizerConfig, cfg.get("binarizer"), steps=args.steps, seed=args.seed)
        p = bz.train_binarizer(_dataset(args.data), conf)
        p.save(args.out)
        return {"out": args.out, "final_loss": p.losses[-1] if p.losses else None}
    if stage == "renderer":
        conf = _make(render.RendererConfig, cfg.get("renderer"), steps=args.steps, seed=args.seed,
                     loss_log=args.loss_log)
        init = render.RendererParams.load(args.init) if args.init else None
        binarizer = bz.BinarizerParams.load(args.binarizer) if args.binarizer else None
        p = render.train_renderer(_dataset(args.data), init, data.normalize_material(args.material)
                                  if args.material not in render.SCOPES else args.material,
                                  _embedder(args.embedder), binarizer, conf)
        p.save(args.out)
        return {"out": args.out, "material": p.material, "id": p.id, "parent_id": p.parent_id}
    conf = _make(detector.DetectorConfig, cfg.get("detector"), steps=args.steps, seed=args.seed)
    ds = _dataset(args.data)
    cache = detector.SampleCache()
    params = detector.DetectorParams(patch_size=conf.patch_size)
    branches = detector.BRANCHES if args.branch == "both" else (args.branch,)
    for b in branches:
        setattr(params, b, detector.train_detector(ds, b, conf, cache))
    params.save(args.out)
    return {"out": args.out, "val_accuracy": {b: getattr(params, b).val_accuracy for b in branches}}


def cmd_binarize(args, cfg):
    gray = data.read_image(args.image)
    if args.params:
        ridge = bz.hard(bz.binarize(bz.BinarizerParams.load(args.params), gray))
    else:
        ridge = bz.classical_binarize(gray)
    out = args.out or str(Path(args.image).with_name(Path(args.image).stem + "_binary.png"))
    # written in image polarity: ridges black
    data.write_image(out, 1.0 - ridge.astype(np.float64))
    return {"out": out, "ridge_fraction": float(ridge.mean())}


def cmd_generate(args, cfg):
    gcfg = pipeline.GenerationConfig.from_dict(cfg)
    if args.out:
        gcfg.output_root = args.out
    ds = pipeline.generate_dataset(gcfg)
    return {"root": str(ds.root), "images": len(ds)}


def cmd_stats(args, cfg):
    binarizer = None
    if args.binarizer:
        params = bz.BinarizerParams.load(args.binarizer)

        def binarizer(g):
            return bz.binarize(params, g)
    st = minutiae.fingerprint_stats(_dataset(args.manifest), binarizer)
    if args.out:
        st.to_csv(args.out)
    return {"rows": {n: [m, s] for n, m, s in st.rows()}, "minutiae_per_megapixel": st.minutiae_per_megapixel,
            "degenerate_area": st.degenerate_area, "n_images": st.n_images}


def cmd_eval(args, cfg):
    emb = _embedder(args.embedder)
    if args.kind == "match":
        ds = _dataset(args.data)
        s = match.score_distributions(ds, emb, args.pairing, material=args.material, seed=args.seed or 0)
        name = s.label
        if args.out:
            match.write_scores_csv(args.out, {name: s})
        tars = match.tar_at_far(s, args.far)
        return {"counts": s.counts(), "tar_at_far": [{"far": f, "threshold": t, "tar": r} for f, t, r in tars]}
    if not (args.synthetic and args.training):
        raise ConfigError("eval leakage needs --synthetic and --training")
    rep = match.leakage_check(_dataset(args.synthetic, "synthetic"), _dataset(args.training), emb, args.threshold)
    if args.out:
        rep.to_json(args.out)
    return {"flagged_fingers": rep.flagged_fingers, "max_score": rep.max_score,
            "total_comparisons": rep.total_comparisons, "flagged_pairs": len(rep.pairs)}


def cmd_experiment(args, cfg):
    ex = dict(cfg.get("experiment", {}))
    for key in ("real", "synthetic", "out_dir"):
        if key not in ex:
            raise ConfigError(f"[experiment] needs {key!r}")
    real = _dataset(ex["real"], "real")
    synthetic = _dataset(ex["synthetic"], "synthetic")
    evals = {k: _dataset(v, "real") for k, v in ex.get("eval_sets", {}).items()} or None
    conf = _make(detector.DetectorConfig, cfg.get("detector"))
    res = detector.run_augmentation_experiment(
        real, synthetic, ex.get("compositions", detector.COMPOSITIONS),
        ex.get("real_fractions", detector.REAL_FRACTIONS), evals, config=conf,
        fdr_target=ex.get("fdr_target", detector.FDR_TARGET), out_dir=ex["out_dir"], seed=ex.get("seed", 0))
    return {"out_dir": ex["out_dir"], "cells": len(res.rows), "skipped": len(res.skipped), "trained": res.trained}


def cmd_report(args, cfg):
    rc = pipeline.EvalConfig.from_dict(cfg)
    if args.out:
        rc.out_dir = args.out
    return pipeline.replicate_eval_protocol(rc)


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="Synthetic live and spoof fingerprint toolkit.")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="validate, import or export a dataset")
    d.add_argument("action", choices=["validate", "import", "export"])
    d.add_argument("path", help="dataset root or manifest")
    d.add_argument("--manifest", help="manifest to write (import)")
    d.add_argument("--out", help="output root (export)")
    d.set_defaults(func=cmd_dataset)

    b = sub.add_parser("basis", help="synthesize or inspect a deformation basis")
    b.add_argument("action", choices=["synth", "inspect"])
    b.add_argument("path", nargs="?", help="basis file (inspect)")
    b.add_argument("--out")
    b.add_argument("--grid", type=int, default=16)
    b.add_argument("--t", type=int, default=8)
    b.add_argument("--rms-px", type=float, default=4.0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_basis)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["masterprint", "binarizer", "renderer", "detector"])
    t.add_argument("--data", required=True, help="dataset root or manifest")
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--material", default="pretrain", help="renderer scope or spoof material")
    t.add_argument("--branch", default="both", choices=["whole", "patch", "both"])
    t.add_argument("--binarizer", help="binarizer checkpoint (renderer)")
    t.add_argument("--embedder", help="embedder checkpoint (renderer)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-log")
    t.set_defaults(func=cmd_train)

    z = sub.add_parser("binarize", help="binarize one image")
    z.add_argument("image")
    z.add_argument("--params", help="binarizer checkpoint (default: classical)")
    z.add_argument("--out")
    z.set_defaults(func=cmd_binarize)

    g = sub.add_parser("generate", help="generate a synthetic dataset ([generate] section)")
    g.add_argument("--out", help="override output_root")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", help="fingerprint statistics of a dataset")
    s.add_argument("manifest")
    s.add_argument("--binarizer")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    e = sub.add_parser("eval", help="match-score distributions or leakage audit")
    e.add_argument("kind", choices=["match", "leakage"])
    e.add_argument("--data")
    e.add_argument("--pairing", default="live-live", choices=list(match.PAIRINGS))
    e.add_argument("--material")
    e.add_argument("--far", type=float, nargs="+", default=list(pipeline.FAR_TARGETS))
    e.add_argument("--synthetic")
    e.add_argument("--training")
    e.add_argument("--threshold", type=float, default=0.9)
    e.add_argument("--embedder")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="training-composition experiments")
    x.add_argument("name", choices=["augmentation"])
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="evaluation report bundle ([report] section)")
    r.add_argument("--out", help="override out_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "eval" and args.kind == "match" and not args.data:
            raise ConfigError("eval match needs --data")
        result = args.func(args, _toml(args.config))
    except ForgeError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
