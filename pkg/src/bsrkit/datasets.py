"""Synthetic labelled image sets used for training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .validation import check_images, check_labels

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "diamond")


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None = None   # (N, 4) as row0, col0, row1, col1 (exclusive)
    num_classes: int | None = None

    def __post_init__(self):
        self.images = check_images(self.images, value_range=True, name="images")
        self.labels = check_labels(self.labels, self.images.shape[0], self.num_classes, name="labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index],
                              None if self.boxes is None else self.boxes[index], self.num_classes)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    r = (np.arange(size) + 0.5) - size / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    half = size / 2
    if kind == "disk":
        return xx ** 2 + yy ** 2 <= half ** 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "triangle":
        # apex up; width grows linearly with row
        rows = (yy + half) / size
        return np.abs(xx) <= rows * half
    if kind == "cross":
        arm = max(1.0, size / 6)
        return (np.abs(xx) <= arm) | (np.abs(yy) <= arm)
    if kind == "ring":
        rad = np.sqrt(xx ** 2 + yy ** 2)
        return (rad <= half) & (rad >= half * 0.55)
    if kind == "diamond":
        return np.abs(xx) + np.abs(yy) <= half
    raise ConfigurationError(f"unknown shape {kind!r}")


def make_shapes(n_samples: int, num_classes: int = 4, image_size: int = 32, seed=0,
                motifs=(8, 14), motif_size=(5, 7), noise: float = 0.06) -> LabeledDataset:
    """Objects made of small repeated motifs on textured backgrounds.

    The class decides the motif kind (disk, square, triangle, ...). Each
    image holds a random number of same-coloured motifs scattered inside an
    object region, so local parts of the object carry the class evidence.
    ``motifs=(1, 1)`` with a large ``motif_size`` yields one big shape per
    image instead. ``boxes`` hold the bounding box of all motif pixels.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"num_classes must lie in [2, {len(SHAPE_NAMES)}]")
    lo_size, hi_size = motif_size
    if image_size < 12 or hi_size > image_size:
        raise ConfigurationError("image_size must be at least 12 and no smaller than the motifs")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    images = np.empty((n_samples, 3, image_size, image_size), dtype=np.float32)
    boxes = np.empty((n_samples, 4), dtype=np.int64)
    grid = np.arange(image_size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for i, label in enumerate(labels):
        bg = rng.uniform(0.0, 0.6, size=3)
        freq = rng.uniform(0.2, 0.8)
        theta = rng.uniform(0, np.pi)
        stripes = 0.08 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        img = bg[:, None, None] + stripes[None]
        fg = np.clip(bg + rng.choice([-1, 1], size=3) * rng.uniform(0.3, 0.5, size=3), 0, 1)
        fg = fg if np.abs(fg - bg).sum() > 0.6 else 1.0 - bg
        # object region that the motifs are scattered in
        extent = int(rng.integers(image_size // 2, image_size + 1))
        r_obj = int(rng.integers(0, image_size - extent + 1))
        c_obj = int(rng.integers(0, image_size - extent + 1))
        covered = np.zeros((image_size, image_size), dtype=bool)
        for _ in range(int(rng.integers(motifs[0], motifs[1] + 1))):
            size = int(rng.integers(lo_size, min(hi_size, extent) + 1))
            r0 = r_obj + int(rng.integers(0, extent - size + 1))
            c0 = c_obj + int(rng.integers(0, extent - size + 1))
            covered[r0:r0 + size, c0:c0 + size] |= _shape_mask(SHAPE_NAMES[label], size, rng)
        img[:, covered] = fg[:, None]
        img += rng.normal(0, noise, size=img.shape)
        images[i] = np.clip(img, 0, 1)
        rows, cols = np.nonzero(covered)
        boxes[i] = (rows.min(), cols.min(), rows.max() + 1, cols.max() + 1)
    return LabeledDataset(images, labels, boxes, num_classes)
