"""Classical image operators: global histogram equalization, lung-mask
application, close cropping to the foreground bounding box, and bilinear
resizing.

Conventions fixed here and relied on by the rest of the pipeline:

* background is exactly intensity 0; ``close_crop`` treats only 0 as
  background and ``apply_mask`` writes 0 outside the mask
* equalization is global (whole image, one LUT) and preserves bit depth;
  an image with a single distinct intensity is returned unchanged
* resizing is bilinear with corner-aligned sampling: output sample j along
  an axis of input length n and output length m reads source coordinate
  j*(n-1)/(m-1); a length-1 output axis samples coordinate 0
* fractional results round half-up
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyContentError
from .rasters import GrayImage, LungMask


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def equalize_histogram(img: GrayImage) -> GrayImage:
    """Map intensities through the normalized cumulative histogram.

    out(v) = round((cdf(v) - cdf_min) / (N - cdf_min) * (2^depth - 1)) where
    N is the pixel count and cdf_min the cdf at the lowest occupied bin. The
    mapping is monotone non-decreasing, so intensity ranks are preserved.
    """
    levels = img.max_value + 1
    counts = np.bincount(img.pixels.ravel(), minlength=levels)
    cdf = np.cumsum(counts)
    n = img.pixels.size
    occupied = np.nonzero(counts)[0]
    cdf_min = int(cdf[occupied[0]])
    if cdf_min == n:  # single distinct intensity: formula degenerates to 0/0
        return GrayImage(img.pixels.copy(), img.depth)
    lut = _round_half_up((cdf - cdf_min) / (n - cdf_min) * img.max_value)
    lut = np.clip(lut, 0, img.max_value).astype(img.pixels.dtype)
    return GrayImage(lut[img.pixels], img.depth)


def apply_mask(img: GrayImage, mask: LungMask) -> GrayImage:
    """Keep pixels under the mask, set everything else to background 0."""
    if (img.height, img.width) != (mask.height, mask.width):
        raise ValueError(
            f"image {img.height}x{img.width} and mask "
            f"{mask.height}x{mask.width} dimensions differ"
        )
    out = np.where(mask.bits, img.pixels, 0).astype(img.pixels.dtype)
    return GrayImage(out, img.depth)


def close_crop(img: GrayImage) -> tuple[GrayImage, tuple[int, int, int, int]]:
    """Crop to the tight bounding box of nonzero pixels.

    Returns the cropped image and the half-open box (row0, col0, row1, col1).
    Every border row/column of the output contains at least one nonzero pixel.
    """
    rows = np.any(img.pixels != 0, axis=1)
    cols = np.any(img.pixels != 0, axis=0)
    if not rows.any():
        raise EmptyContentError("close_crop on an all-background image")
    r0, r1 = int(np.argmax(rows)), int(len(rows) - np.argmax(rows[::-1]))
    c0, c1 = int(np.argmax(cols)), int(len(cols) - np.argmax(cols[::-1]))
    return GrayImage(img.pixels[r0:r1, c0:c1].copy(), img.depth), (r0, c0, r1, c1)


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.zeros(1)
    return np.linspace(0.0, n_src - 1.0, n_dst)


def resize(img: GrayImage, w: int, h: int) -> GrayImage:
    """Bilinear resample to w x h with corner-aligned sampling."""
    if w < 1 or h < 1:
        raise ValueError("target dimensions must be positive")
    if (w, h) == (img.width, img.height):
        return GrayImage(img.pixels.copy(), img.depth)
    src = img.pixels.astype(np.float64)
    ys = _axis_coords(img.height, h)
    xs = _axis_coords(img.width, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    out = np.clip(_round_half_up(out), 0, img.max_value)
    return GrayImage(out.astype(img.pixels.dtype), img.depth)


def pad_to_square(img: GrayImage, value: int = 0) -> GrayImage:
    """Letterbox a non-square image to a square with background padding,
    keeping the content centered. Used so anatomy is never stretched."""
    side = max(img.width, img.height)
    if img.width == img.height:
        return GrayImage(img.pixels.copy(), img.depth)
    out = np.full((side, side), value, dtype=img.pixels.dtype)
    r0 = (side - img.height) // 2
    c0 = (side - img.width) // 2
    out[r0 : r0 + img.height, c0 : c0 + img.width] = img.pixels
    return GrayImage(out, img.depth)


def letterbox(img: GrayImage, size: int) -> GrayImage:
    """Pad to square then bilinearly resize to size x size."""
    return resize(pad_to_square(img), size, size)
