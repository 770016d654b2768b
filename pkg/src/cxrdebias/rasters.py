"""Core raster types: single-channel images with explicit bit depth, and
binary lung masks, plus PNG round-tripping for both.

Every operator in the package consumes and produces these two types. Pixels
are kept as 2-D row-major numpy arrays; ``GrayImage.depth`` records bits per
sample (8, 12 or 16) so 12-bit data can travel in a uint16 array without
losing its valid range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

VALID_DEPTHS = (8, 12, 16)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster. ``pixels`` is (height, width), unsigned int."""

    pixels: np.ndarray
    depth: int

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.ndim != 2:
            raise ValueError("pixels must be a 2-D numpy array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have positive width and height")
        if self.depth not in VALID_DEPTHS:
            raise ValueError(f"depth must be one of {VALID_DEPTHS}, got {self.depth}")
        if px.dtype.kind != "u":
            raise ValueError(f"pixels must be an unsigned integer array, got {px.dtype}")
        if px.size and int(px.max()) > self.max_value:
            raise ValueError(
                f"intensity {int(px.max())} exceeds 2^{self.depth}-1 = {self.max_value}"
            )

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def max_value(self) -> int:
        return (1 << self.depth) - 1

    def astype_float(self) -> np.ndarray:
        """Pixels normalized to [0, 1] float32."""
        return self.pixels.astype(np.float32) / self.max_value


@dataclass(frozen=True, eq=False)
class LungMask:
    """Binary raster aligned to the image it was produced for."""

    bits: np.ndarray

    def __post_init__(self):
        b = self.bits
        if not isinstance(b, np.ndarray) or b.ndim != 2:
            raise ValueError("mask bits must be a 2-D numpy array")
        if b.dtype != np.bool_:
            raise ValueError(f"mask bits must be boolean, got {b.dtype}")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def image_from_array(arr: np.ndarray, depth: int = 8) -> GrayImage:
    """Build a GrayImage from any numeric array, clipping to the valid range."""
    hi = (1 << depth) - 1
    dtype = np.uint8 if depth == 8 else np.uint16
    clipped = np.clip(np.asarray(arr, dtype=np.float64), 0, hi)
    return GrayImage(np.floor(clipped + 0.5).astype(dtype), depth)


def save_png(img: GrayImage, path) -> None:
    """Write as 8-bit (mode L) or 16-bit (mode I;16) grayscale PNG."""
    if img.depth == 8:
        Image.fromarray(img.pixels.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(img.pixels.astype(np.uint16)).save(path)


def load_png(path) -> GrayImage:
    """Read a grayscale PNG; 8-bit files load as depth 8, 16-bit as depth 16."""
    with Image.open(path) as im:
        if im.mode == "L":
            return GrayImage(np.asarray(im, dtype=np.uint8), 8)
        if im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.int32)
            return GrayImage(arr.astype(np.uint16), 16)
        if im.mode == "1":
            return GrayImage(np.asarray(im.convert("L"), dtype=np.uint8), 8)
        raise ValueError(f"unsupported PNG mode {im.mode!r} for grayscale load")


def save_mask_png(mask: LungMask, path) -> None:
    """Masks persist as 8-bit PNG with values {0, 255}."""
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> LungMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return LungMask(arr >= 128)
