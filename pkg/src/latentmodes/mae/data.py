"""Procedural toy images, HOG targets and token masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..numerics import RngStream

SHAPES = ("circle", "square", "triangle", "cross", "ring")
# two color families; each draw jitters around its anchor
COLORS = (np.array([0.85, 0.25, 0.15]), np.array([0.15, 0.45, 0.9]))
N_CLASSES = len(SHAPES) * len(COLORS)


@dataclass
class ToyImageSet:
    images: np.ndarray      # n x S x S x 3 in [0, 1]
    labels: np.ndarray      # n, class = shape * 2 + color

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ToyImageSet":
        return ToyImageSet(self.images[idx], self.labels[idx])


def _shape_mask(kind: str, xx, yy, cx, cy, r):
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "triangle":
        # apex up, base at cy + 0.7r
        return (dy <= 0.7 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = 0.3 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def gen_toy_dataset(n: int, rng: RngStream, image_size: int = 32) -> ToyImageSet:
    """Shapes x colors on a noisy background; classes balanced within one."""
    if n < 1:
        raise ValueError("need n >= 1")
    S = image_size
    labels = np.arange(n) % N_CLASSES
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    images = np.empty((n, S, S, 3))
    for i in range(n):
        shape_id, color_id = divmod(int(labels[i]), len(COLORS))
        r = rng.uniform(0.18, 0.3) * S
        cx = rng.uniform(r, S - r)
        cy = rng.uniform(r, S - r)
        bg = rng.uniform(0.0, 0.35) + rng.uniform(-0.1, 0.1, size=3)
        img = np.broadcast_to(bg, (S, S, 3)).copy()
        img = img + 0.04 * rng.normal((S, S, 3))
        color = COLORS[color_id] + rng.uniform(-0.1, 0.1, size=3)
        mask = _shape_mask(SHAPES[shape_id], xx, yy, cx, cy, r)
        img[mask] = color
        images[i] = np.clip(img, 0.0, 1.0)
    return ToyImageSet(images, labels.astype(np.int64))


def grayscale(image):
    return np.ascontiguousarray(image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114)


def hog_features(image, cell: int = 4, bins: int = 8, eps: float = 1e-6):
    """Per-patch unsigned orientation histograms, L2-normalized; shape (patches, bins)."""
    img = np.asarray(image, dtype=np.float64)
    gray = grayscale(img) if img.ndim == 3 else np.ascontiguousarray(img)
    if gray.shape[0] % cell or gray.shape[1] % cell:
        raise ValueError(f"image {gray.shape} not divisible into {cell}px cells")
    h = kernels.hog_cells(gray, cell, bins).reshape(-1, bins)
    norm = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
    return h / (norm + eps)


def hog_batch(images, cell: int = 4, bins: int = 8):
    return np.stack([hog_features(img, cell, bins) for img in images])


@dataclass
class MaskSpec:
    indicator: np.ndarray   # (N,) or (B, N) of 0/1
    ratio: float

    @property
    def count(self) -> int:
        return int(self.indicator.sum())


def _mask_for(N: int, ratio: float, rng: RngStream):
    m = np.zeros(N)
    k = int(round(ratio * N))
    if k:
        m[rng.choice(N, size=k, replace=False)] = 1.0
    return m


def mask_sample(N: int, mask_low: float, mask_high: float, rng: RngStream, batch: int | None = None) -> MaskSpec:
    """Ratio ~ U[low, high]; round(ratio * N) positions masked without replacement.

    With ``batch`` every row gets its own positions at the shared ratio.
    """
    ratio = float(rng.uniform(mask_low, mask_high)) if mask_high > mask_low else float(mask_low)
    if batch is None:
        return MaskSpec(_mask_for(N, ratio, rng), ratio)
    return MaskSpec(np.stack([_mask_for(N, ratio, rng) for _ in range(batch)]), ratio)


def patchify(images, patch: int):
    """(B, S, S, C) -> (B, N, patch*patch*C), patches in row-major order."""
    B, S, _, C = images.shape
    g = S // patch
    x = images.reshape(B, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, patch * patch * C)


def unpatchify(patches, patch: int, channels: int = 3):
    B, N, _ = patches.shape
    g = int(round(np.sqrt(N)))
    x = patches.reshape(B, g, g, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * patch, g * patch, channels)
