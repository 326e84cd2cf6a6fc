"""Synthetic three-class pattern dataset standing in for the CXR cohort.

healthy -> horizontal sinusoidal bands, non_covid_pneumonia -> vertical
bands, covid_pneumonia -> checkerboard. Period, phase, contrast and additive
Gaussian noise vary per image. Orientation survives the +-15 degree affine
range used for augmentation.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ._sampling import substream
from .data_ingest import CLASSES, ManifestRecord, write_manifest


def pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 image (size, size) of class ``label``."""
    period = rng.uniform(size / 10, size / 5)
    phase = rng.uniform(0, 2 * np.pi)
    contrast = rng.uniform(0.25, 0.4)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if label == 0:
        base = np.sin(2 * np.pi * yy / period + phase)
    elif label == 1:
        base = np.sin(2 * np.pi * xx / period + phase)
    else:
        base = np.sin(2 * np.pi * yy / period + phase) * np.sin(2 * np.pi * xx / period + phase)
    img = 0.5 + contrast * base + rng.normal(0, 0.08, size=(size, size))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_toy_dataset(out_dir: str | Path, n_per_class: int, image_size: int = 64,
                         seed: int = 0) -> list[ManifestRecord]:
    """Write ``images/*.png`` and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for ci, label in enumerate(CLASSES):
        for k in range(n_per_class):
            rng = substream(seed, ci, k)
            img = pattern(ci, image_size, rng)
            rid = f"{label[:3]}{k:05d}"
            rel = f"images/{rid}.png"
            Image.fromarray(img).save(out / rel, optimize=False)
            view = ("PA", "AP", None)[int(rng.integers(3))]
            age = int(rng.integers(18, 90)) if rng.random() < 0.95 else None
            sex = ("male", "female", None)[int(rng.integers(3))]
            records.append(ManifestRecord(rid, rel, label, view, age, sex))
    write_manifest(records, out / "manifest.csv")
    return records
