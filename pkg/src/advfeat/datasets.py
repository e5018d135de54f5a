"""Seeded synthetic image datasets.

Every image is procedurally drawn, lightly noised, and quantized to 8-bit
levels at creation, so datasets are bit-reproducible from (seed, sizes) and
behave exactly like images loaded from PNG files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .image import ImageTensor, from_array, quantize
from .seeding import child_seed

PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.90, 0.20),
    (0.25, 0.35, 0.95),
    (0.92, 0.88, 0.20),
)


@dataclass
class ClassifSample:
    image: ImageTensor
    label: int
    image_id: str


@dataclass
class SegSample:
    image: ImageTensor
    mask: np.ndarray
    image_id: str


@dataclass
class ClassificationDataset:
    dataset_id: str
    num_classes: int
    image_size: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class SegmentationDataset:
    dataset_id: str
    num_classes: int
    image_size: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class RetrievalDataset:
    dataset_id: str
    num_groups: int
    image_size: int
    queries: list = field(default_factory=list)
    gallery: list = field(default_factory=list)


def _finish(canvas: np.ndarray, rng: np.random.Generator, noise: float) -> ImageTensor:
    canvas = canvas + rng.normal(0.0, noise, size=canvas.shape)
    return quantize(from_array(np.clip(canvas, 0.0, 1.0).astype(np.float32)))


def _blob_alpha(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def _composite(size: int, cy: float, cx: float, sigma: float, color) -> np.ndarray:
    alpha = _blob_alpha(size, cy, cx, sigma)[:, :, None]
    bg = np.full((size, size, 3), 0.5, dtype=np.float64)
    return bg * (1.0 - alpha) + np.asarray(color, dtype=np.float64) * alpha


def _class_center(label: int, size: int) -> tuple[float, float]:
    q = size / 4.0
    return {
        0: (q, q),
        1: (q, 3 * q),
        2: (3 * q, q),
        3: (3 * q, 3 * q),
    }[label]


def make_classification_dataset(
    seed: int = 0,
    image_size: int = 32,
    train_per_class: int = 8,
    test_per_class: int = 8,
    noise: float = 0.06,
    dataset_id: Optional[str] = None,
) -> ClassificationDataset:
    """Four classes that differ in blob color and quadrant position."""
    num_classes = 4
    ds_id = dataset_id or f"synth-cls-s{seed}-n{image_size}"
    rng = np.random.default_rng(child_seed(seed, "classification", str(image_size)))
    sigma = image_size / 7.0
    jitter = image_size / 16.0
    out = ClassificationDataset(ds_id, num_classes, image_size)
    for split, per_class, bucket in (
        ("train", train_per_class, out.train),
        ("test", test_per_class, out.test),
    ):
        for i in range(per_class * num_classes):
            label = i % num_classes
            cy, cx = _class_center(label, image_size)
            cy += float(rng.uniform(-jitter, jitter))
            cx += float(rng.uniform(-jitter, jitter))
            canvas = _composite(image_size, cy, cx, sigma, PALETTE[label])
            bucket.append(
                ClassifSample(
                    image=_finish(canvas, rng, noise),
                    label=label,
                    image_id=f"cls-{split}-{i:03d}",
                )
            )
    return out


def make_segmentation_dataset(
    seed: int = 0,
    image_size: int = 32,
    num_train: int = 24,
    num_test: int = 16,
    noise: float = 0.06,
    dataset_id: Optional[str] = None,
) -> SegmentationDataset:
    """Foreground blob vs background; the mask follows the blob support."""
    ds_id = dataset_id or f"synth-seg-s{seed}-n{image_size}"
    rng = np.random.default_rng(child_seed(seed, "segmentation", str(image_size)))
    out = SegmentationDataset(ds_id, 2, image_size)
    margin = image_size / 4.0
    for split, count, bucket in (("train", num_train, out.train), ("test", num_test, out.test)):
        for i in range(count):
            cy = float(rng.uniform(margin, image_size - margin))
            cx = float(rng.uniform(margin, image_size - margin))
            sigma = float(rng.uniform(image_size / 8.0, image_size / 5.0))
            color = PALETTE[int(rng.integers(len(PALETTE)))]
            alpha = _blob_alpha(image_size, cy, cx, sigma)
            canvas = (
                np.full((image_size, image_size, 3), 0.5, dtype=np.float64)
                * (1.0 - alpha[:, :, None])
                + np.asarray(color, dtype=np.float64) * alpha[:, :, None]
            )
            bucket.append(
                SegSample(
                    image=_finish(canvas, rng, noise),
                    mask=(alpha > 0.5).astype(np.int64),
                    image_id=f"seg-{split}-{i:03d}",
                )
            )
    return out


def _group_base(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency random pattern: a 4x4 color grid upsampled bilinearly."""
    coarse = rng.uniform(0.1, 0.9, size=(4, 4, 3))
    ys = np.linspace(0, 3, size)
    xs = np.linspace(0, 3, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    top = c00 * (1 - wx) + c01 * wx
    bot = c10 * (1 - wx) + c11 * wx
    return top * (1 - wy) + bot * wy


def make_retrieval_dataset(
    seed: int = 0,
    image_size: int = 32,
    num_groups: int = 8,
    gallery_per_group: int = 3,
    noise: float = 0.04,
    dataset_id: Optional[str] = None,
) -> RetrievalDataset:
    """Groups of near-duplicate patterns; the query must find its own group."""
    ds_id = dataset_id or f"synth-ret-s{seed}-n{image_size}"
    rng = np.random.default_rng(child_seed(seed, "retrieval", str(image_size)))
    out = RetrievalDataset(ds_id, num_groups, image_size)
    for g in range(num_groups):
        base = _group_base(rng, image_size)
        variants = 1 + gallery_per_group
        for v in range(variants):
            shifted = np.roll(
                base,
                (int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
                axis=(0, 1),
            )
            img = _finish(shifted, rng, noise)
            if v == 0:
                out.queries.append(
                    ClassifSample(image=img, label=g, image_id=f"ret-q-{g:02d}")
                )
            else:
                out.gallery.append(
                    ClassifSample(image=img, label=g, image_id=f"ret-g-{g:02d}-{v - 1}")
                )
    return out
