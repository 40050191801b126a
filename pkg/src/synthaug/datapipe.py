"""Image ingestion, average-hash deduplication, preprocessing and splits.

Also hosts the procedural toy corpus (disc vs. diagonal cross) that stands
in for the radiograph collection at desk scale.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .numerics import Tensor

log = logging.getLogger(__name__)

LABELS = ("COVID-CXR", "Normal-CXR")
LABEL_ALIASES = {"class0": "COVID-CXR", "class1": "Normal-CXR"}
TOY_CLASS_NAMES = {0: "class0", 1: "class1"}


class IngestError(RuntimeError):
    """A manifest entry could not be loaded."""


def canonical_label(label: str) -> str:
    label = LABEL_ALIASES.get(label, label)
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS} or {tuple(LABEL_ALIASES)}")
    return label


def label_index(label: str) -> int:
    return LABELS.index(canonical_label(label))


# ----------------------------------------------------------------- data types

@dataclass(frozen=True)
class ImageRecord:
    id: str
    source: str
    pixels: np.ndarray
    label: str
    hash64: int

    @classmethod
    def create(cls, id: str, source: str, pixels: np.ndarray, label: str) -> "ImageRecord":
        px = np.asarray(pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.dtype != np.uint8:
            raise ValueError(f"{id}: pixels must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"{id}: expected h x w x c with c in (1, 3), got {px.shape}")
        px = px.copy()
        px.setflags(write=False)
        return cls(id, source, px, canonical_label(label), average_hash(px))

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    source: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)

    @property
    def counts(self) -> dict[str, int]:
        out = {lab: 0 for lab in LABELS}
        for e in self.entries:
            out[canonical_label(e.label)] += 1
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> str:
        rows = [{"path": e.path, "label": e.label, "source": e.source} for e in self.entries]
        return json.dumps(rows, indent=2) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    rows = json.loads(path.read_text())
    if not isinstance(rows, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    entries = []
    for i, row in enumerate(rows):
        try:
            entries.append(ManifestEntry(str(row["path"]), str(row["label"]), str(row["source"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: entry {i} lacks path/label/source") from exc
    return DatasetManifest(entries, path.parent)


@dataclass
class SplitSpec:
    train: list[str]
    test: list[str]
    seed: int
    stratified: bool = True

    def to_dict(self) -> dict:
        return {"train": self.train, "test": self.test, "seed": self.seed, "stratified": self.stratified}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        return cls(list(d["train"]), list(d["test"]), int(d["seed"]), bool(d.get("stratified", True)))


@dataclass(frozen=True)
class ToyCorpusSpec:
    resolution: int = 32
    per_class: int = 50
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError(f"toy resolution must be >= 16, got {self.resolution}")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"noise level must lie in [0, 1], got {self.noise}")


# -------------------------------------------------------------- image helpers

def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an (h, w, c) array, float64 out.

    No antialiasing: each output pixel samples its four nearest inputs.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {(height, width)}")
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, height)
    x0, x1, wx = axis(w, width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def average_hash(pixels: np.ndarray) -> int:
    """64-bit average hash: 8x8 bilinear grayscale, bit set where value > mean.

    Bits are taken row-major with the first pixel as the most significant bit.
    """
    gray = to_gray(pixels)
    small = resize_bilinear(gray[:, :, None], 8, 8)[:, :, 0]
    bits = (small > small.mean()).ravel()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


# ------------------------------------------------------------------ operations

def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise IngestError(f"{path}: not a PNG (format {im.format})")
            if im.mode in ("P", "RGBA"):
                im = im.convert("RGB")
            elif im.mode == "LA":
                im = im.convert("L")
            if im.mode not in ("L", "RGB"):
                raise IngestError(f"{path}: unsupported mode {im.mode}; need 8-bit grayscale or RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except FileNotFoundError as exc:
        raise IngestError(f"missing image file: {path}") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestError(f"unreadable or corrupt image: {path} ({exc})") from exc


def write_png(path: Path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    Image.fromarray(px, "L" if px.ndim == 2 else "RGB").save(path, format="PNG")


def ingest(manifest: DatasetManifest, workers: int = 1) -> list[ImageRecord]:
    """Load every manifest entry, in manifest order."""
    for e in manifest.entries:
        canonical_label(e.label)

    ids = record_ids(manifest)

    def load(item) -> ImageRecord:
        rid, entry = item
        return ImageRecord.create(rid, entry.source, read_png(manifest.resolve(entry)), entry.label)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(load, zip(ids, manifest.entries)))
    else:
        records = [load(item) for item in zip(ids, manifest.entries)]
    log.info("ingested %d records: %s", len(records), class_counts(records))
    return records


def record_ids(manifest: DatasetManifest) -> list[str]:
    """File stems when unique across the manifest, else suffix-free paths."""
    stems = [Path(e.path).stem for e in manifest.entries]
    if len(set(stems)) == len(stems):
        return stems
    return [str(Path(e.path).with_suffix("")) for e in manifest.entries]


def class_counts(records: Iterable[ImageRecord]) -> dict[str, int]:
    out = {lab: 0 for lab in LABELS}
    for r in records:
        out[r.label] += 1
    return out


def ingest_report(records: Sequence[ImageRecord]) -> dict:
    sources: dict[str, int] = {}
    for r in records:
        sources[r.source] = sources.get(r.source, 0) + 1
    return {
        "total": len(records),
        "per_class": class_counts(records),
        "per_source": dict(sorted(sources.items())),
        "records": [{"id": r.id, "label": r.label, "source": r.source,
                     "shape": list(r.pixels.shape), "hash64": f"{r.hash64:016x}"} for r in records],
    }


def dedup(records: Sequence[ImageRecord], hamming_threshold: int = 0):
    """Drop records within ``hamming_threshold`` of an earlier kept record.

    Returns ``(kept, removed)`` where ``removed`` lists
    ``{"kept": id, "removed": id, "hamming": int}`` in input order.
    """
    if hamming_threshold < 0:
        raise ValueError("hamming_threshold must be >= 0")
    kept: list[ImageRecord] = []
    removed: list[dict] = []
    for rec in records:
        match = None
        for k in kept:
            d = hamming(rec.hash64, k.hash64)
            if d <= hamming_threshold:
                match = (k, d)
                break
        if match is None:
            kept.append(rec)
        else:
            removed.append({"kept": match[0].id, "removed": rec.id, "hamming": match[1]})
    return kept, removed


def preprocess(records, target: tuple[int, int], range: str = "unit") -> Tensor:
    """Resize to ``target`` (bilinear), replicate gray to RGB, and rescale.

    ``range="unit"`` maps [0, 255] to [0, 1]; ``"symmetric"`` to [-1, 1].
    Accepts ImageRecords or raw uint8 arrays.
    """
    h, w = target
    if h <= 0 or w <= 0:
        raise ValueError(f"target dims must be positive, got {target}")
    if range not in ("unit", "symmetric"):
        raise ValueError(f"unknown range {range!r}")
    out = np.empty((len(records), h, w, 3), dtype=np.float32)
    for i, rec in enumerate(records):
        px = rec.pixels if isinstance(rec, ImageRecord) else np.asarray(rec)
        if px.ndim == 2:
            px = px[:, :, None]
        img = resize_bilinear(px, h, w)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if range == "unit":
            img = img / 255.0
        else:
            img = img / 127.5 - 1.0
        out[i] = img
    if range == "unit":
        np.clip(out, 0.0, 1.0, out=out)
    else:
        np.clip(out, -1.0, 1.0, out=out)
    return Tensor(out)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(records: Sequence[ImageRecord], test_fraction, seed: int) -> SplitSpec:
    """Stratified train/test split, deterministic for ``seed``.

    ``test_fraction`` is a float shared by every class or a mapping
    label -> fraction. Each class keeps at least one sample per side.
    """
    by_class: dict[str, list[str]] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r.id)
    rng = np.random.default_rng(seed)
    test_ids: set[str] = set()
    for label in sorted(by_class):
        ids = by_class[label]
        frac = test_fraction[label] if isinstance(test_fraction, Mapping) else test_fraction
        if not 0 < frac < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {frac} for {label}")
        if len(ids) < 2:
            raise ValueError(f"class {label} has {len(ids)} sample(s); need at least 2 to split")
        n_test = min(max(_round_half_up(frac * len(ids)), 1), len(ids) - 1)
        order = rng.permutation(len(ids))
        test_ids.update(ids[j] for j in order[:n_test])
    train = [r.id for r in records if r.id not in test_ids]
    test = [r.id for r in records if r.id in test_ids]
    return SplitSpec(train, test, seed, True)


# ------------------------------------------------------------------ toy corpus

def toy_template(cls: int, n: int) -> np.ndarray:
    """Noise-free toy image (n x n, uint8): class 0 disc, class 1 diagonal cross."""
    rr, cc = np.mgrid[0:n, 0:n]
    img = np.full((n, n), 128.0)
    if cls == 0:
        c = (n - 1) / 2
        mask = (rr - c) ** 2 + (cc - c) ** 2 <= (0.3 * n) ** 2
    elif cls == 1:
        mask = (np.abs(rr - cc) <= 1) | (np.abs(rr + cc - (n - 1)) <= 1)
    else:
        raise ValueError(f"toy class must be 0 or 1, got {cls}")
    img[mask] = 255.0
    return img


def gen_toy_corpus(spec: ToyCorpusSpec) -> list[ImageRecord]:
    rng = np.random.default_rng(spec.seed)
    records = []
    for cls in (0, 1):
        base = toy_template(cls, spec.resolution)
        for i in range(spec.per_class):
            noisy = base + rng.normal(0.0, spec.noise * 255.0, size=base.shape) if spec.noise > 0 else base
            px = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)[:, :, None]
            name = TOY_CLASS_NAMES[cls]
            records.append(ImageRecord.create(f"toy_{name}_{i:04d}", "toy", px, name))
    return records


def write_records(records: Sequence[ImageRecord], out_dir: str | os.PathLike,
                  subdir: str = "images") -> DatasetManifest:
    """Write records as PNGs plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / subdir).mkdir(parents=True, exist_ok=True)
    entries = []
    for r in records:
        rel = f"{subdir}/{r.id}.png"
        write_png(out / rel, r.pixels)
        entries.append(ManifestEntry(rel, r.label, r.source))
    manifest = DatasetManifest(entries, out)
    manifest.save(out / "manifest.json")
    return manifest
