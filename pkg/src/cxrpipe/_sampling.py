"""Shared low-level helpers: seeded substreams and bilinear sampling."""

from __future__ import annotations

import numpy as np


def substream_seed(seed: int, *keys: int) -> int:
    """Derive a 63-bit child seed from ``seed`` and integer keys.

    The derivation only depends on the values, never on call order, so work
    keyed this way is independent of scheduling.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *keys))


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # a + t*(b-a) returns a exactly when a == b, so constants survive sampling
    return a + t * (b - a)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C, H, W) at fractional source coordinates.

    ``ys`` and ``xs`` share an output shape (h, w). Coordinates outside the
    image are clamped to the border (nearest-edge fill). Returns (C, h, w).
    """
    _, height, width = img.shape
    ys = np.clip(ys, 0.0, height - 1)
    xs = np.clip(xs, 0.0, width - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    top = _lerp(img[:, y0, x0], img[:, y0, x1], fx)
    bottom = _lerp(img[:, y1, x0], img[:, y1, x1], fx)
    out = _lerp(top, bottom, fy)
    lo, hi = img.min(), img.max()
    return np.clip(out, lo, hi, out=out)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (C, H, W) to (C, height, width) using half-pixel-centre bilinear mapping."""
    _, src_h, src_w = img.shape
    if (src_h, src_w) == (height, width):
        return img.copy()
    ys = (np.arange(height, dtype=np.float64) + 0.5) * (src_h / height) - 0.5
    xs = (np.arange(width, dtype=np.float64) + 0.5) * (src_w / width) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx)
