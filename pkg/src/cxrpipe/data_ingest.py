"""Manifest loading, image normalisation and stratified train/val/test splits."""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ._sampling import resize_bilinear

CLASSES = ("healthy", "non_covid_pneumonia", "covid_pneumonia")
VIEWS = ("PA", "AP")
SEXES = ("male", "female")
MANIFEST_HEADER = ("id", "filepath", "label", "view", "age", "sex")

# Split sizes used for the 1248-image cohort.
COHORT_SPLIT = (998, 125, 125)


class ManifestError(ValueError):
    """Raised for unreadable or malformed manifests."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    filepath: str
    label: str
    view: Optional[str] = None
    age: Optional[int] = None
    sex: Optional[str] = None

    @property
    def class_index(self) -> int:
        return CLASSES.index(self.label)


@dataclass(frozen=True)
class DatasetSplit:
    seed: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train": list(self.train),
             "validation": list(self.validation), "test": list(self.test)},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        obj = json.loads(text)
        return cls(int(obj["seed"]), tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _parse_row(row: list[str], lineno: int) -> ManifestRecord:
    if len(row) != len(MANIFEST_HEADER):
        raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
    rid, filepath, label, view, age, sex = (c.strip() for c in row)
    if not rid:
        raise ManifestError(f"line {lineno}: empty id")
    if not filepath:
        raise ManifestError(f"line {lineno}: empty filepath")
    if label not in CLASSES:
        raise ManifestError(f"line {lineno}: unknown label {label!r}")
    if view and view not in VIEWS:
        raise ManifestError(f"line {lineno}: unknown view {view!r}")
    if sex and sex not in SEXES:
        raise ManifestError(f"line {lineno}: unknown sex {sex!r}")
    try:
        age_val = int(age) if age else None
    except ValueError:
        raise ManifestError(f"line {lineno}: age {age!r} is not an integer") from None
    return ManifestRecord(rid, filepath, label, view or None, age_val, sex or None)


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read a manifest CSV (header ``id,filepath,label,view,age,sex``)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"line 1: header must be {','.join(MANIFEST_HEADER)}")
        records = []
        seen: set[str] = set()
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            rec = _parse_row(row, lineno)
            if rec.id in seen:
                raise ManifestError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.id, r.filepath, r.label, r.view or "",
                             "" if r.age is None else r.age, r.sex or ""])


def class_counts(records: Sequence[ManifestRecord]) -> dict[str, int]:
    counts = dict.fromkeys(CLASSES, 0)
    for r in records:
        counts[r.label] += 1
    return counts


def normalize_image(raw: np.ndarray, target_size: tuple[int, int], channels: int = 1) -> np.ndarray:
    """Resize an 8-bit grayscale image bilinearly and scale it to [0, 1].

    Returns a float32 array of shape (channels, height, width). With
    ``channels=3`` the grey plane is replicated.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or 0 in raw.shape:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {raw.shape}")
    height, width = target_size
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {target_size}")
    img = raw.astype(np.float64)[None] / 255.0
    out = resize_bilinear(img, height, width).astype(np.float32)
    if channels == 3:
        out = np.repeat(out, 3, axis=0)
    elif channels != 1:
        raise ValueError("channels must be 1 or 3")
    return out


def read_grayscale(path: str | Path) -> np.ndarray:
    """Decode an image file to uint8 grayscale; RGB goes through Rec.601 luma."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            if im.mode == "RGB":
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc


def load_images(records: Sequence[ManifestRecord], root: str | Path, size: int,
                channels: int = 1, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Decode and normalise every record's image. Returns (X, y) in record order."""
    root = Path(root)

    def one(rec: ManifestRecord) -> np.ndarray:
        return normalize_image(read_grayscale(root / rec.filepath), (size, size), channels)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(one, records))
    else:
        images = [one(r) for r in records]
    x = np.stack(images) if images else np.zeros((0, channels, size, size), np.float32)
    y = np.array([r.class_index for r in records], dtype=np.int64)
    return x, y


def _controlled_rounding(targets: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray) -> np.ndarray:
    """Round a real matrix to floor/ceil integers with exact row and column sums."""
    base = np.floor(targets + 1e-9).astype(np.int64)
    frac_cells = [(i, j) for i in range(targets.shape[0]) for j in range(targets.shape[1])
                  if targets[i, j] - base[i, j] > 1e-9]
    need_rows = row_sums - base.sum(axis=1)
    need_cols = col_sums - base.sum(axis=0)
    for bits in itertools.product((0, 1), repeat=len(frac_cells)):
        extra = np.zeros_like(base)
        for (i, j), b in zip(frac_cells, bits):
            extra[i, j] = b
        if np.array_equal(extra.sum(axis=1), need_rows) and np.array_equal(extra.sum(axis=0), need_cols):
            return base + extra
    raise SplitError("no stratified allocation exists for the requested counts")


def split_dataset(manifest: Sequence[ManifestRecord], counts: tuple[int, int, int], seed: int,
                  min_per_split: int = 0) -> DatasetSplit:
    """Seeded split stratified by diagnosis class.

    Each class contributes floor or ceil of its proportional share to every
    split. ``min_per_split`` demands that every class present in the
    manifest contributes at least that many examples to each non-empty split.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise SplitError(f"counts must be three non-negative integers, got {counts}")
    n = len(manifest)
    if sum(counts) != n:
        raise SplitError(f"counts {counts} sum to {sum(counts)} but the manifest has {n} records")
    by_class = {c: sorted(r.id for r in manifest if r.label == c) for c in CLASSES}
    rng = np.random.default_rng(seed)
    for c in CLASSES:
        ids = by_class[c]
        by_class[c] = [ids[i] for i in rng.permutation(len(ids))]

    sizes = np.array([len(by_class[c]) for c in CLASSES], dtype=np.int64)
    col = np.array(counts, dtype=np.int64)
    targets = np.outer(sizes, col) / max(n, 1)
    alloc = _controlled_rounding(targets, sizes, col)
    if min_per_split:
        for ci, c in enumerate(CLASSES):
            for si in range(3):
                if sizes[ci] and col[si] and alloc[ci, si] < min_per_split:
                    raise SplitError(f"class {c} has too few examples ({sizes[ci]}) to give "
                                     f"{min_per_split} to every split")

    parts: list[list[str]] = [[], [], []]
    for ci, c in enumerate(CLASSES):
        start = 0
        for si in range(3):
            parts[si].extend(by_class[c][start:start + alloc[ci, si]])
            start += alloc[ci, si]
    shuffled = [tuple(p[i] for i in rng.permutation(len(p))) for p in parts]
    return DatasetSplit(int(seed), *shuffled)
