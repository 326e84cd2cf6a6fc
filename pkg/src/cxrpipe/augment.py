"""Conventional affine augmentation, mixup and RICAP.

Images are float arrays shaped (C, H, W); batches are (B, C, H, W). Labels
are soft label rows of length 3. Every function takes an explicit
``numpy.random.Generator`` and consumes it in a fixed, documented order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ._sampling import bilinear_sample, substream

ROTATION_RANGE = 15.0
SHIFT_RANGE = 0.15
SCALE_RANGE = (0.85, 1.15)
SHEAR_RANGE = 15.0


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    shift_x_frac: float = 0.0
    shift_y_frac: float = 0.0
    flip_horizontal: bool = False
    scale: float = 1.0
    shear_deg: float = 0.0

    def __post_init__(self):
        checks = (
            (abs(self.rotation_deg) <= ROTATION_RANGE, "rotation_deg"),
            (abs(self.shift_x_frac) <= SHIFT_RANGE, "shift_x_frac"),
            (abs(self.shift_y_frac) <= SHIFT_RANGE, "shift_y_frac"),
            (SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1], "scale"),
            (abs(self.shear_deg) <= SHEAR_RANGE, "shear_deg"),
        )
        for ok, name in checks:
            if not ok:
                raise ValueError(f"{name}={getattr(self, name)} outside its allowed range")

    @property
    def is_geometric_identity(self) -> bool:
        return (self.rotation_deg == 0 and self.shift_x_frac == 0 and self.shift_y_frac == 0
                and self.scale == 1 and self.shear_deg == 0)


@dataclass(frozen=True)
class AugmentationPolicy:
    conventional_enabled: bool = False
    mixup_enabled: bool = False
    mixup_alpha: float = 0.1
    ricap_enabled: bool = False
    ricap_beta: float = 0.3

    def __post_init__(self):
        if self.mixup_enabled and not self.mixup_alpha > 0:
            raise ValueError("mixup_alpha must be positive")
        if self.ricap_enabled and not self.ricap_beta > 0:
            raise ValueError("ricap_beta must be positive")

    @property
    def name(self) -> str:
        parts = [n for n, on in (("conv", self.conventional_enabled), ("mixup", self.mixup_enabled),
                                 ("ricap", self.ricap_enabled)) if on]
        return "+".join(parts) or "none"

    def to_config(self) -> dict[str, str]:
        return {"conventional": str(self.conventional_enabled).lower(),
                "mixup": str(self.mixup_enabled).lower(),
                "mixup_alpha": repr(self.mixup_alpha),
                "ricap": str(self.ricap_enabled).lower(),
                "ricap_beta": repr(self.ricap_beta)}

    @classmethod
    def from_config(cls, section) -> "AugmentationPolicy":
        def flag(key, default):
            raw = str(section.get(key, default)).strip().lower()
            if raw not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"{key}: expected a boolean, got {raw!r}")
            return raw in ("true", "1", "yes", "on")
        return cls(conventional_enabled=flag("conventional", "false"),
                   mixup_enabled=flag("mixup", "false"),
                   mixup_alpha=float(section.get("mixup_alpha", 0.1)),
                   ricap_enabled=flag("ricap", "false"),
                   ricap_beta=float(section.get("ricap_beta", 0.3)))

    def as_dict(self) -> dict:
        return asdict(self)


def preset(name: str, mixup_alpha: float = 0.1, ricap_beta: float = 0.3) -> AugmentationPolicy:
    """Policy from a name such as ``"conv+mixup"`` or ``"none"``."""
    parts = set() if name == "none" else set(name.split("+"))
    unknown = parts - {"conv", "mixup", "ricap"}
    if unknown:
        raise ValueError(f"unknown augmentation family {sorted(unknown)}")
    return AugmentationPolicy("conv" in parts, "mixup" in parts, mixup_alpha, "ricap" in parts, ricap_beta)


PRESET_NAMES = ("none", "conv", "mixup", "ricap", "conv+mixup", "conv+ricap", "conv+mixup+ricap")
ABLATION_PRESETS = ("none", "conv", "mixup", "conv+mixup", "conv+ricap", "conv+mixup+ricap")
DEFAULT_POLICY = AugmentationPolicy(conventional_enabled=True, mixup_enabled=True, mixup_alpha=0.1)


def sample_affine(rng: np.random.Generator) -> AffineParams:
    """Draw rotation, shifts, flip, scale, shear in that order."""
    rotation = rng.uniform(-ROTATION_RANGE, ROTATION_RANGE)
    shift_x = rng.uniform(-SHIFT_RANGE, SHIFT_RANGE)
    shift_y = rng.uniform(-SHIFT_RANGE, SHIFT_RANGE)
    flip = bool(rng.random() < 0.5)
    scale = rng.uniform(*SCALE_RANGE)
    shear = rng.uniform(-SHEAR_RANGE, SHEAR_RANGE)
    return AffineParams(float(rotation), float(shift_x), float(shift_y), flip, float(scale), float(shear))


def affine_matrix(p: AffineParams, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward map (matrix A, offset t) in (x, y) pixel coordinates about the centre.

    Composition order is scale, shear, rotation; translation is the shift
    fractions times the image size.
    """
    s = np.diag([p.scale, p.scale])
    sh = np.array([[1.0, math.tan(math.radians(p.shear_deg))], [0.0, 1.0]])
    a = math.radians(p.rotation_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return rot @ sh @ s, np.array([p.shift_x_frac * width, p.shift_y_frac * height])


def apply_affine(img: np.ndarray, p: AffineParams) -> np.ndarray:
    """Warp (C, H, W) by ``p`` with bilinear sampling and nearest-edge fill; flip last."""
    if p.is_geometric_identity:
        out = img.copy()
    else:
        _, height, width = img.shape
        mat, shift = affine_matrix(p, height, width)
        inv = np.linalg.inv(mat)
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
        dx = xx - cx - shift[0]
        dy = yy - cy - shift[1]
        src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
        src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
        out = bilinear_sample(img, src_y, src_x)
    if p.flip_horizontal:
        out = np.ascontiguousarray(out[:, :, ::-1])
    return out


def _check_batch(images: np.ndarray, labels: np.ndarray) -> None:
    if images.ndim != 4:
        raise ValueError(f"images must be (B, C, H, W), got shape {images.shape}")
    if labels.shape != (images.shape[0], labels.shape[-1]) or labels.ndim != 2:
        raise ValueError(f"labels shape {labels.shape} does not match batch of {images.shape[0]}")
    if images.shape[0] < 1:
        raise ValueError("empty batch")


def affine_batch(images: np.ndarray, rng: np.random.Generator, workers: int = 1) -> np.ndarray:
    """Independent affine draw per example.

    One integer batch key is drawn from ``rng``; example ``i`` uses the
    substream (key, i), so the result does not depend on ``workers``.
    """
    key = int(rng.integers(0, 2**63 - 1))

    def one(i: int) -> np.ndarray:
        return apply_affine(images[i], sample_affine(substream(key, i)))

    if workers > 1 and len(images) > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(len(images))))
    else:
        out = [one(i) for i in range(len(images))]
    return np.stack(out).astype(images.dtype, copy=False)


def mixup_batch(images: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator,
                lam: Optional[float] = None, partner: Optional[np.ndarray] = None,
                per_example: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Mix each example with a permuted partner: ``lam*x_i + (1-lam)*x_j``.

    Draw order: lambda ~ Beta(alpha, alpha) (one per batch, or one per
    example with ``per_example``), then the partner permutation. ``lam`` and
    ``partner`` override the draws.
    """
    _check_batch(images, labels)
    b = images.shape[0]
    if lam is None:
        lam_v = rng.beta(alpha, alpha, size=b if per_example else None)
    else:
        lam_v = lam
    if partner is None:
        partner = rng.permutation(b)
    lam_arr = np.broadcast_to(np.asarray(lam_v, dtype=np.float64), (b,))
    if np.all(lam_arr == 1.0):
        return images.copy(), labels.copy()
    li = lam_arr.reshape(b, 1, 1, 1).astype(images.dtype)
    mixed = li * images + (1 - li) * images[partner]
    ll = lam_arr.reshape(b, 1)
    mixed_labels = ll * labels + (1 - ll) * labels[partner]
    return mixed, mixed_labels


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class RicapLayout:
    """Geometry of one RICAP output: boundary, donors and crop corners."""
    w: int
    h: int
    donors: tuple[int, int, int, int]
    offsets: tuple[tuple[int, int], ...]  # (y0, x0) of each donor's crop

    def quadrants(self, height: int, width: int) -> list[tuple[int, int, int, int]]:
        """(y, x, qh, qw) destination boxes: top-left, top-right, bottom-left, bottom-right."""
        w, h = self.w, self.h
        return [(0, 0, h, w), (0, w, h, width - w), (h, 0, height - h, w), (h, w, height - h, width - w)]


def ricap_layout(rng: np.random.Generator, batch: int, height: int, width: int, beta: float,
                 uv: Optional[tuple[float, float]] = None) -> RicapLayout:
    """Draw u, v, the four donor indices, then (y0, x0) for each quadrant."""
    u, v = uv if uv is not None else (rng.beta(beta, beta), rng.beta(beta, beta))
    w = min(max(_round_half_up(u * width), 0), width)
    h = min(max(_round_half_up(v * height), 0), height)
    donors = tuple(int(d) for d in rng.integers(0, batch, size=4))
    offsets = []
    for qh, qw in ((h, w), (h, width - w), (height - h, w), (height - h, width - w)):
        y0 = int(rng.integers(0, height - qh + 1))
        x0 = int(rng.integers(0, width - qw + 1))
        offsets.append((y0, x0))
    return RicapLayout(w, h, donors, tuple(offsets))


def ricap_assemble(images: np.ndarray, labels: np.ndarray, layout: RicapLayout) -> tuple[np.ndarray, np.ndarray]:
    _, c, height, width = images.shape
    out = np.empty((c, height, width), dtype=images.dtype)
    label = np.zeros(labels.shape[1], dtype=np.float64)
    for (y, x, qh, qw), donor, (y0, x0) in zip(layout.quadrants(height, width), layout.donors, layout.offsets):
        if qh == 0 or qw == 0:
            continue
        out[:, y:y + qh, x:x + qw] = images[donor, :, y0:y0 + qh, x0:x0 + qw]
        label += (qh * qw) / (height * width) * labels[donor]
    return out, label


def ricap_batch(images: np.ndarray, labels: np.ndarray, beta: float, rng: np.random.Generator,
                uv: Optional[tuple[float, float]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Patch four random crops into each output image; labels weighted by patch area.

    Layouts are drawn example by example from ``rng`` (see ``ricap_layout``).
    """
    _check_batch(images, labels)
    b, _, height, width = images.shape
    if b < 4:
        raise ValueError(f"RICAP needs a batch of at least 4, got {b}")
    if height < 2 or width < 2:
        raise ValueError(f"RICAP needs images of at least 2x2, got {height}x{width}")
    out_imgs = np.empty_like(images)
    out_labels = np.empty(labels.shape, dtype=np.float64)
    for i in range(b):
        layout = ricap_layout(rng, b, height, width, beta, uv)
        out_imgs[i], out_labels[i] = ricap_assemble(images, labels, layout)
    return out_imgs, out_labels


def augment_training_batch(images: np.ndarray, labels: np.ndarray, policy: AugmentationPolicy,
                           rng: np.random.Generator, workers: int = 1,
                           mixup_lam: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Affine per example, then mixup, then RICAP; disabled stages pass through.

    RICAP is skipped for batches smaller than four (the trailing partial
    batch of an epoch).
    """
    _check_batch(images, labels)
    if policy.conventional_enabled:
        images = affine_batch(images, rng, workers)
    if policy.mixup_enabled:
        images, labels = mixup_batch(images, labels, policy.mixup_alpha, rng, lam=mixup_lam)
    if policy.ricap_enabled and images.shape[0] >= 4:
        images, labels = ricap_batch(images, labels, policy.ricap_beta, rng)
    return images, labels
