"""Impression records, manifests and on-disk datasets.

A dataset is a directory of 8-bit grayscale images plus a CSV manifest with
one row per image.  Images are addressed by paths relative to the dataset
root so a dataset can be moved or copied as a unit.
"""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateRecord,
    ExportError,
    ImageDecodeError,
    ManifestParseError,
    MissingImage,
    RecordError,
)

MANIFEST_HEADER = (
    "finger_id",
    "impression_id",
    "material",
    "is_live",
    "split",
    "image_path",
    "width",
    "height",
    "dpi",
)
MANIFEST_NAME = "manifest.csv"
DEFAULT_DPI = 500
GENERATED_SIZE = 512
SPLITS = ("train", "test")
LOSSLESS_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".pgm"}

DEFAULT_MATERIALS = (
    "live",
    "ecoflex",
    "body_double",
    "gelatine",
    "playdoh",
    "paper",
    "tattoo",
    "latex",
    "wood_glue",
    "oomoo",
    "silicone",
    "dragon_skin",
    "transparency",
    "conductive_ink",
)


def normalize_material(name: str, vocabulary: Iterable[str] | None = None) -> str:
    """Lowercase a material name and fold spaces/hyphens to underscores."""
    norm = re.sub(r"[\s\-]+", "_", str(name).strip().lower())
    if not norm:
        raise RecordError("material label must be non-empty")
    if vocabulary is not None and norm not in set(vocabulary):
        raise RecordError(f"material {norm!r} not in vocabulary")
    return norm


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ImpressionRecord:
    finger_id: str
    impression_id: int
    material: str
    is_live: bool
    split: str
    image_path: str
    width: int
    height: int
    dpi: int = DEFAULT_DPI

    def __post_init__(self):
        object.__setattr__(self, "material", normalize_material(self.material))
        object.__setattr__(self, "image_path", Path(self.image_path).as_posix())
        if not str(self.finger_id):
            raise RecordError("finger_id must be non-empty")
        if int(self.impression_id) < 0:
            raise RecordError("impression_id must be >= 0")
        if bool(self.is_live) != (self.material == "live"):
            raise RecordError(
                f"is_live={self.is_live} inconsistent with material {self.material!r}"
            )
        if self.split not in SPLITS:
            raise RecordError(f"split must be one of {SPLITS}, got {self.split!r}")
        p = Path(self.image_path)
        if p.is_absolute() or ".." in p.parts:
            raise RecordError(f"image_path must be relative to the root: {self.image_path}")
        if self.width <= 0 or self.height <= 0:
            raise RecordError("image dimensions must be positive")

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.finger_id, self.impression_id, self.material)

    def to_row(self) -> list[str]:
        return [
            self.finger_id,
            str(self.impression_id),
            self.material,
            "true" if self.is_live else "false",
            self.split,
            self.image_path,
            str(self.width),
            str(self.height),
            str(self.dpi),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "ImpressionRecord":
        return cls(
            finger_id=row["finger_id"],
            impression_id=int(row["impression_id"]),
            material=row["material"],
            is_live=_parse_bool(row["is_live"]),
            split=row["split"].strip(),
            image_path=row["image_path"],
            width=int(row["width"]),
            height=int(row["height"]),
            dpi=int(row["dpi"]),
        )


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of impression records rooted at a directory.

    ``provenance`` marks where the images came from (``"real"`` captures or
    ``"synthetic"`` renders); it is carried alongside the records rather than
    in the manifest.
    """

    root: Path
    records: tuple[ImpressionRecord, ...] = ()
    provenance: str = "real"

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "records", tuple(self.records))
        check_unique(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImpressionRecord]:
        return iter(self.records)

    def path_of(self, record: ImpressionRecord) -> Path:
        return self.root / record.image_path

    def load_image(self, record: ImpressionRecord) -> np.ndarray:
        """Image as float64 in [0, 1]."""
        return read_image(self.path_of(record))

    def subset(self, records: Iterable[ImpressionRecord]) -> "Dataset":
        return replace(self, records=tuple(records))

    def filter(self, *, material=None, is_live=None, split=None, finger_ids=None) -> "Dataset":
        recs = self.records
        if material is not None:
            mats = {material} if isinstance(material, str) else set(material)
            mats = {normalize_material(m) for m in mats}
            recs = [r for r in recs if r.material in mats]
        if is_live is not None:
            recs = [r for r in recs if r.is_live == is_live]
        if split is not None:
            recs = [r for r in recs if r.split == split]
        if finger_ids is not None:
            ids = set(finger_ids)
            recs = [r for r in recs if r.finger_id in ids]
        return self.subset(recs)

    @property
    def materials(self) -> list[str]:
        return sorted({r.material for r in self.records})

    @property
    def finger_ids(self) -> list[str]:
        return sorted({r.finger_id for r in self.records})


def check_unique(records: Sequence[ImpressionRecord]) -> None:
    seen = {}
    for i, r in enumerate(records):
        if r.key in seen:
            raise DuplicateRecord(
                f"records {seen[r.key]} and {i} share key {r.key}"
            )
        seen[r.key] = i


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageDecodeError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray, dpi: int = DEFAULT_DPI) -> None:
    """Write a [0, 1] float (or uint8) array as lossless 8-bit grayscale."""
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise ExportError(f"{path}: not a lossless image format")
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    im = Image.fromarray(np.ascontiguousarray(arr))
    fmt = Image.registered_extensions()[path.suffix.lower()]
    if fmt == "PNG":
        im.save(tmp, format=fmt, dpi=(dpi, dpi), optimize=False)
    else:
        im.save(tmp, format=fmt)
    os.replace(tmp, path)


def read_manifest(manifest) -> list[ImpressionRecord]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise ManifestParseError(0, f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError(1, "empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestParseError(1, f"unexpected header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestParseError(lineno, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            try:
                records.append(ImpressionRecord.from_row(dict(zip(MANIFEST_HEADER, row))))
            except (ValueError, RecordError) as exc:
                raise ManifestParseError(lineno, str(exc)) from exc
    return records


def write_manifest(manifest, records: Iterable[ImpressionRecord]) -> Path:
    manifest = Path(manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow(r.to_row())
    return manifest


def load_dataset(root, manifest=None, *, verify: bool = True, provenance: str = "real") -> Dataset:
    """Load a dataset from ``root`` and its manifest.

    Parameters
    ----------
    root : path
        Directory that image paths are relative to.
    manifest : path, optional
        Manifest CSV; defaults to ``root/manifest.csv``.
    verify : bool
        Check that every image exists, is 8-bit grayscale and matches the
        recorded size (header read only).
    """
    root = Path(root)
    manifest = Path(manifest) if manifest is not None else root / MANIFEST_NAME
    records = read_manifest(manifest)
    check_unique(records)
    if verify:
        for r in records:
            p = root / r.image_path
            if not p.is_file():
                raise MissingImage(r)
            try:
                with Image.open(p) as im:
                    mode, size = im.mode, im.size
            except OSError as exc:
                raise ImageDecodeError(f"{p}: {exc}") from exc
            if mode != "L":
                raise ImageDecodeError(f"{p}: expected 8-bit grayscale, got mode {mode}")
            if size != (r.width, r.height):
                raise ImageDecodeError(f"{p}: size {size} != manifest {(r.width, r.height)}")
    return Dataset(root=root, records=records, provenance=provenance)


def export_dataset(dataset: Dataset, out_root) -> Path:
    """Copy every image of ``dataset`` under ``out_root`` and write its manifest."""
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        for r in dataset.records:
            img = dataset.load_image(r)
            write_image(out_root / r.image_path, img, dpi=r.dpi)
        return write_manifest(out_root / MANIFEST_NAME, dataset.records)
    except OSError as exc:
        raise ExportError(f"cannot export to {out_root}: {exc}") from exc


@dataclass
class LivDetAdapter:
    """Map a LivDet-style directory tree onto manifest records.

    Expected layout (names configurable)::

        root/<split dir>/Live/*.png
        root/<split dir>/Fake/<Material>/*.png

    LivDet file names carry no finger identity, so by default every file
    becomes its own finger.  ``finger_pattern`` (a regex with a ``finger``
    and optional ``impression`` group, matched against the file stem) lets
    live and spoof captures of one finger share an id when the layout
    encodes it.
    """

    split_dirs: dict = field(default_factory=lambda: {"Training": "train", "Testing": "test"})
    live_dirs: tuple = ("Live",)
    spoof_dirs: tuple = ("Fake", "Spoof")
    suffixes: tuple = (".png", ".bmp", ".tif", ".tiff")
    finger_pattern: str | None = None
    dpi: int = DEFAULT_DPI

    @classmethod
    def from_config(cls, cfg: dict) -> "LivDetAdapter":
        kw = dict(cfg)
        for k in ("live_dirs", "spoof_dirs", "suffixes"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def _images(self, d: Path) -> list[Path]:
        return sorted(p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in self.suffixes)

    def _record(self, root: Path, path: Path, split: str, material: str) -> ImpressionRecord:
        if self.finger_pattern is None:
            finger, impression = f"{split}/{material}/{path.stem}", 0
        else:
            m = re.fullmatch(self.finger_pattern, path.stem)
            if m is None:
                raise ManifestParseError(0, f"{path.name} does not match finger_pattern")
            finger = f"{split}/{m.group('finger')}"
            impression = int(m.groupdict().get("impression") or 0)
        with Image.open(path) as im:
            w, h = im.size
        return ImpressionRecord(
            finger_id=finger,
            impression_id=impression,
            material=material,
            is_live=material == "live",
            split=split,
            image_path=path.relative_to(root).as_posix(),
            width=w,
            height=h,
            dpi=self.dpi,
        )

    def records(self, root) -> list[ImpressionRecord]:
        root = Path(root)
        out = []
        for split_name, split in self.split_dirs.items():
            sdir = root / split_name
            if not sdir.is_dir():
                continue
            for live in self.live_dirs:
                for p in self._images(sdir / live) if (sdir / live).is_dir() else []:
                    out.append(self._record(root, p, split, "live"))
            for spoof in self.spoof_dirs:
                spdir = sdir / spoof
                if not spdir.is_dir():
                    continue
                for mdir in sorted(d for d in spdir.iterdir() if d.is_dir()):
                    material = normalize_material(mdir.name)
                    for p in self._images(mdir):
                        out.append(self._record(root, p, split, material))
        return out


def import_dataset(root, adapter: LivDetAdapter | None = None, manifest=None) -> Dataset:
    """Build and write a manifest for an existing directory tree."""
    root = Path(root)
    adapter = adapter or LivDetAdapter()
    records = adapter.records(root)
    check_unique(records)
    write_manifest(Path(manifest) if manifest else root / MANIFEST_NAME, records)
    return Dataset(root=root, records=records)
