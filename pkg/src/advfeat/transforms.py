"""Input transforms used to test whether perturbations survive preprocessing.

Every transform maps an (H, W, 3) image in [0, 1] to another one; rotation
changes orientation only, resize goes down and back up so the backbone still
sees the original geometry.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from PIL import Image as PILImage
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import correlate1d
from scipy.signal import wiener as _scipy_wiener

from .errors import UnsupportedParameter
from .image import _GRID, ImageTensor, from_array, to_levels

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class TransformSpec:
    name: str
    params: Mapping = field(default_factory=dict)

    @property
    def detail(self) -> str:
        """Stable label for reports, e.g. "jpeg(quality=50)"."""
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={self.params[k]}" for k in sorted(self.params))
        return f"{self.name}({inner})"


def default_transform_suite() -> list:
    """The standard robustness battery."""
    return [
        TransformSpec("identity"),
        TransformSpec("hflip"),
        TransformSpec("vflip"),
        TransformSpec("wiener", {"size": 21}),
        TransformSpec("blur", {"kernel": 21}),
        TransformSpec("jpeg", {"quality": 50}),
        TransformSpec("grayscale"),
        TransformSpec("rotate", {"degrees": 90}),
        TransformSpec("resize", {"size": 98}),
        TransformSpec("brightness", {"factor": 2.0}),
        TransformSpec("contrast", {"factor": 2.0}),
        TransformSpec("hue", {"shift": 0.5}),
    ]


def _require(params: Mapping, key: str, spec_name: str):
    if key not in params:
        raise UnsupportedParameter(f"{spec_name} needs parameter {key!r}")
    return params[key]


def _reject_unknown(params: Mapping, allowed: tuple, spec_name: str) -> None:
    extra = set(params) - set(allowed)
    if extra:
        raise UnsupportedParameter(f"{spec_name} got unknown parameters {sorted(extra)}")


def _wiener(px: np.ndarray, size: int) -> np.ndarray:
    if not (isinstance(size, int) and size >= 3 and size % 2 == 1):
        raise UnsupportedParameter(f"wiener size must be an odd int >= 3, got {size}")
    out = np.empty_like(px, dtype=np.float64)
    for c in range(3):
        # flat regions have zero local variance; the filter divides by it
        with np.errstate(divide="ignore", invalid="ignore"):
            filtered = _scipy_wiener(px[:, :, c].astype(np.float64), mysize=size)
        # zero local variance makes the filter emit NaN; keep the input there
        bad = ~np.isfinite(filtered)
        filtered[bad] = px[:, :, c][bad]
        out[:, :, c] = filtered
    return out


def _blur(px: np.ndarray, kernel: int) -> np.ndarray:
    if not (isinstance(kernel, int) and kernel >= 3 and kernel % 2 == 1):
        raise UnsupportedParameter(f"blur kernel must be an odd int >= 3, got {kernel}")
    sigma = 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8
    radius = (kernel - 1) // 2
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    k /= k.sum()
    out = px.astype(np.float64)
    out = correlate1d(out, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return out


def _jpeg(px: np.ndarray, quality: int) -> np.ndarray:
    if not (isinstance(quality, int) and 1 <= quality <= 100):
        raise UnsupportedParameter(f"jpeg quality must be an int in [1, 100], got {quality}")
    buf = io.BytesIO()
    PILImage.fromarray(to_levels(px), mode="RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with PILImage.open(buf) as img:
        levels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return _GRID[levels]


def _grayscale(px: np.ndarray) -> np.ndarray:
    luma = px.astype(np.float64) @ _LUMA
    return np.repeat(luma[:, :, None], 3, axis=2)


def _rotate(px: np.ndarray, degrees: int) -> np.ndarray:
    if degrees % 90 != 0:
        raise UnsupportedParameter(f"rotation supports multiples of 90, got {degrees}")
    return np.rot90(px, k=(degrees // 90) % 4, axes=(0, 1)).copy()


def _resize(px: np.ndarray, size: int) -> np.ndarray:
    if not (isinstance(size, int) and size >= 1):
        raise UnsupportedParameter(f"resize size must be a positive int, got {size}")
    h, w = px.shape[:2]
    img = PILImage.fromarray(to_levels(px), mode="RGB")
    down = img.resize((size, size), PILImage.BILINEAR)
    back = down.resize((w, h), PILImage.BILINEAR)
    return _GRID[np.asarray(back, dtype=np.uint8)]


def _brightness(px: np.ndarray, factor: float) -> np.ndarray:
    if not (math.isfinite(factor) and factor >= 0):
        raise UnsupportedParameter(f"brightness factor must be >= 0, got {factor}")
    return px.astype(np.float64) * factor


def _contrast(px: np.ndarray, factor: float) -> np.ndarray:
    if not (math.isfinite(factor) and factor >= 0):
        raise UnsupportedParameter(f"contrast factor must be >= 0, got {factor}")
    anchor = float((px.astype(np.float64) @ _LUMA).mean())
    return anchor + factor * (px.astype(np.float64) - anchor)


def _hue(px: np.ndarray, shift: float) -> np.ndarray:
    if not (math.isfinite(shift) and -0.5 <= shift <= 0.5):
        raise UnsupportedParameter(f"hue shift must lie in [-0.5, 0.5], got {shift}")
    hsv = rgb_to_hsv(px.astype(np.float64))
    hsv[:, :, 0] = (hsv[:, :, 0] + shift) % 1.0
    return hsv_to_rgb(hsv)


def apply_transform(image: ImageTensor, spec: TransformSpec) -> ImageTensor:
    """Apply one named transform; output is clipped back to [0, 1]."""
    px = image.pixels
    name, params = spec.name, spec.params
    if name == "identity":
        _reject_unknown(params, (), name)
        return image
    if name == "hflip":
        _reject_unknown(params, (), name)
        out = px[:, ::-1].astype(np.float64)
    elif name == "vflip":
        _reject_unknown(params, (), name)
        out = px[::-1].astype(np.float64)
    elif name == "wiener":
        _reject_unknown(params, ("size",), name)
        out = _wiener(px, _require(params, "size", name))
    elif name == "blur":
        _reject_unknown(params, ("kernel",), name)
        out = _blur(px, _require(params, "kernel", name))
    elif name == "jpeg":
        _reject_unknown(params, ("quality",), name)
        out = _jpeg(px, _require(params, "quality", name))
    elif name == "grayscale":
        _reject_unknown(params, (), name)
        out = _grayscale(px)
    elif name == "rotate":
        _reject_unknown(params, ("degrees",), name)
        out = _rotate(px, _require(params, "degrees", name))
    elif name == "resize":
        _reject_unknown(params, ("size",), name)
        out = _resize(px, _require(params, "size", name))
    elif name == "brightness":
        _reject_unknown(params, ("factor",), name)
        out = _brightness(px, _require(params, "factor", name))
    elif name == "contrast":
        _reject_unknown(params, ("factor",), name)
        out = _contrast(px, _require(params, "factor", name))
    elif name == "hue":
        _reject_unknown(params, ("shift",), name)
        out = _hue(px, _require(params, "shift", name))
    else:
        raise UnsupportedParameter(f"unknown transform {name!r}")
    return from_array(np.clip(out, 0.0, 1.0).astype(np.float32))
