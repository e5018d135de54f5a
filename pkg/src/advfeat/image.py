"""RGB images as [0,1] float arrays with pixel-grid provenance, plus PNG round trips.

Pixels are stored float32 (H, W, 3). An image is "quantized" iff every channel
value lies exactly on the k/255 grid under float32 storage; quantization uses
round-half-away-from-zero. PNG write/read is bit-exact on quantized tensors,
and all downstream evaluation runs on reloaded tensors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoFailure

_GRID = np.arange(256, dtype=np.float64) / 255.0  # exact float64 grid points


@dataclass(frozen=True)
class ImageTensor:
    """An RGB image as float32 values in [0, 1] with shape (H, W, 3)."""

    pixels: np.ndarray
    quantized: bool

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def from_array(pixels: np.ndarray) -> ImageTensor:
    """Wrap an array as an ImageTensor, detecting grid alignment.

    The array is validated (shape (H, W, 3), all values in [0, 1]) and stored
    as float32. quantized is true iff every value equals k/255 for integer k.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"pixel values outside [0, 1]: min={arr.min()}, max={arr.max()}"
        )
    return ImageTensor(pixels=arr, quantized=is_on_grid(arr))


def is_on_grid(pixels: np.ndarray) -> bool:
    """True iff every float32 value is exactly k/255 for some integer k."""
    levels = np.rint(pixels.astype(np.float64) * 255.0)
    back = (levels / 255.0).astype(np.float32)
    return bool(np.array_equal(back, np.asarray(pixels, dtype=np.float32)))


def quantize(image: ImageTensor) -> ImageTensor:
    """Map every channel value to round(255*v)/255, half away from zero."""
    levels = to_levels(image.pixels)
    pixels = (levels.astype(np.float64) / 255.0).astype(np.float32)
    return ImageTensor(pixels=pixels, quantized=True)


def to_levels(pixels: np.ndarray) -> np.ndarray:
    """8-bit levels for [0,1] pixels, rounding half away from zero."""
    scaled = pixels.astype(np.float64) * 255.0
    # values are nonnegative, so floor(x + 0.5) rounds half away from zero
    levels = np.floor(scaled + 0.5)
    return np.clip(levels, 0, 255).astype(np.uint8)


def save_png(image: ImageTensor, path) -> Path:
    """Write the image as an 8-bit RGB PNG (quantizing if needed)."""
    path = Path(path)
    levels = to_levels(image.pixels)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(levels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path

def load_png(path) -> ImageTensor:
    """Read an 8-bit RGB PNG back into a quantized ImageTensor."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            levels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    pixels = _GRID[levels].astype(np.float32)
    return ImageTensor(pixels=pixels, quantized=True)


def quantize_and_roundtrip(image: ImageTensor, path) -> tuple[Path, ImageTensor]:
    """Quantize, write to PNG and reload.

    The reloaded tensor reproduces the quantized tensor bit-exactly; callers
    must evaluate on the reloaded tensor, not the in-memory float iterate.
    """
    out = save_png(quantize(image), path)
    reloaded = load_png(out)
    return out, reloaded


def linf_distance(a: ImageTensor, b: ImageTensor) -> float:
    """Max absolute per-channel pixel difference."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    return float(
        np.max(np.abs(a.pixels.astype(np.float64) - b.pixels.astype(np.float64)))
    )
