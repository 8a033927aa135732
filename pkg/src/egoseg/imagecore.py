"""Raster image primitives: color conversion, morphology, rotation, resizing, PNG I/O.

Array conventions used across the package:

* RGB 8-bit image: ``uint8`` array of shape ``(H, W, 3)``, interleaved sRGB.
* Grayscale 8-bit image / mask: ``uint8`` array of shape ``(H, W)``.
* Float image: ``float32`` array of shape ``(C, H, W)``, planar. HSV images
  store H in degrees [0, 360) and S, V in [0, 1]; RGB floats live in [0, 1].
* Binary mask: ``uint8`` array of shape ``(H, W)`` with values in {0, 1}.

All functions are pure: same inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

# Pinned PNG encoder settings so identical pixels give identical files.
_PNG_OPTS = {"format": "PNG", "compress_level": 6, "optimize": False}


@dataclass(frozen=True)
class StructuringElement:
    """Morphology kernel: a square or disc of the given pixel radius."""

    radius: int = 1
    shape: str = "square"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"structuring element radius must be >= 1, got {self.radius}")
        if self.shape not in ("square", "disc"):
            raise ValueError(f"structuring element shape must be 'square' or 'disc', got {self.shape!r}")

    def footprint(self) -> np.ndarray:
        """Boolean (2r+1, 2r+1) footprint of the element."""
        r = self.radius
        if self.shape == "square":
            return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return (yy * yy + xx * xx) <= r * r


def ensure_rgb8(img: np.ndarray, name: str = "image") -> np.ndarray:
    if not (isinstance(img, np.ndarray) and img.dtype == np.uint8 and img.ndim == 3 and img.shape[2] == 3):
        raise ValueError(f"{name} must be a uint8 (H, W, 3) array")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must have height and width >= 1")
    return img


def ensure_binary_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    if not (isinstance(mask, np.ndarray) and mask.ndim == 2 and mask.dtype == np.uint8):
        raise ValueError(f"{name} must be a uint8 (H, W) array")
    bad = (mask > 1).sum()
    if bad:
        raise ValueError(f"{name} must contain only 0/1 values ({bad} pixels out of range)")
    return mask


# ---------------------------------------------------------------------------
# 8-bit <-> float conversion


def rgb8_to_f32(img: np.ndarray) -> np.ndarray:
    """Interleaved uint8 (H, W, 3) -> planar float32 (3, H, W) in [0, 1]."""
    ensure_rgb8(img)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0


def f32_to_rgb8(arr: np.ndarray) -> np.ndarray:
    """Planar float (3, H, W) in [0, 1] -> interleaved uint8, round half up."""
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected a planar (3, H, W) float image")
    return quantize_u8(arr.transpose(1, 2, 0))


def quantize_u8(x01: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up and clamping."""
    return np.clip(np.floor(np.asarray(x01, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Color space


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Convert an RGB8 image to a planar float32 (3, H, W) HSV image.

    H is in degrees [0, 360), S and V in [0, 1]. Achromatic pixels get H = 0.
    """
    ensure_rgb8(img)
    rgb = img.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=2)
    c = v - rgb.min(axis=2)
    s = np.where(v > 0, c / np.maximum(v, 1e-20), 0.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        cn = np.where(c > 0, c, 1.0)
        h_r = ((g - b) / cn) % 6.0
        h_g = (b - r) / cn + 2.0
        h_b = (r - g) / cn + 4.0
    h = np.where(v == r, h_r, np.where(v == g, h_g, h_b))
    h = np.where(c > 0, h * 60.0, 0.0) % 360.0
    return np.stack([h, s, v]).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`; returns an RGB8 image.

    Round-trips 8-bit RGB within +/-1 per channel.
    """
    if hsv.ndim != 3 or hsv.shape[0] != 3:
        raise ValueError("expected a planar (3, H, W) HSV image")
    h = (hsv[0].astype(np.float64) % 360.0) / 60.0
    s = np.clip(hsv[1].astype(np.float64), 0.0, 1.0)
    v = np.clip(hsv[2].astype(np.float64), 0.0, 1.0)
    c = v * s
    x = c * (1.0 - np.abs(h % 2.0 - 1.0))
    m = v - c
    zeros = np.zeros_like(h)
    sector = np.floor(h).astype(np.int64) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return quantize_u8(rgb)


# ---------------------------------------------------------------------------
# Binary morphology


def _window_reduce(mask: np.ndarray, se: StructuringElement, op: str) -> np.ndarray:
    """Sliding-window max/min with out-of-bounds pixels treated as 0."""
    ensure_binary_mask(mask)
    r = se.radius
    padded = np.pad(mask, r, mode="constant", constant_values=0)
    win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    fp = se.footprint()
    if op == "max":
        if se.shape == "square":
            return win.max(axis=(2, 3)).astype(np.uint8)
        return (win & fp).max(axis=(2, 3)).astype(np.uint8)
    if se.shape == "square":
        return win.min(axis=(2, 3)).astype(np.uint8)
    return (win | ~fp).min(axis=(2, 3)).astype(np.uint8)


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Binary dilation: 1 iff any pixel under the element is 1."""
    return _window_reduce(mask, se, "max")


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Binary erosion: 1 iff all pixels under the element are 1.

    Windows reaching past the border see zeros, so a border ring erodes away.
    """
    return _window_reduce(mask, se, "min")


def opening(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Erosion followed by dilation; removes speckle smaller than the element."""
    return dilate(erode(mask, se), se)


# ---------------------------------------------------------------------------
# Geometry

SUPPORTED_ROTATIONS = (45, 90, 180)


def rotate(img: np.ndarray, angle: int) -> np.ndarray:
    """Rotate an RGB8 image by 45, 90 or 180 degrees.

    90 and 180 are exact pixel permutations (dimensions swap for 90). 45 uses
    bilinear interpolation about the image center and returns the largest
    axis-aligned inscribed rectangle, so the output never contains fill pixels.
    """
    ensure_rgb8(img)
    if angle not in SUPPORTED_ROTATIONS:
        raise ValueError(f"unsupported rotation angle {angle!r}; expected one of {SUPPORTED_ROTATIONS}")
    if angle == 180:
        return np.ascontiguousarray(img[::-1, ::-1])
    if angle == 90:
        return np.ascontiguousarray(np.rot90(img))
    return _rotate45(img)


def _rotate45(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    # At 45 degrees the maximal inscribed axis-aligned rectangle is the
    # square of side min(w, h)/sqrt(2).
    side = int(np.floor(min(w, h) / np.sqrt(2.0)))
    side = max(side, 1)
    theta = np.deg2rad(45.0)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx = xx + 0.5 - side / 2.0
    dy = yy + 0.5 - side / 2.0
    src_x = cos_t * dx - sin_t * dy + w / 2.0 - 0.5
    src_y = sin_t * dx + cos_t * dy + h / 2.0 - 0.5
    return _bilinear_gather_u8(img, src_x, src_y)


def _bilinear_gather_u8(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    src_x = np.clip(src_x, 0.0, img.shape[1] - 1.0)
    src_y = np.clip(src_y, 0.0, img.shape[0] - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]
    p = img.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return quantize_u8((top * (1 - fy) + bot * fy) / 255.0)


def _axis_coords(out_len: int, in_len: int):
    """Half-pixel-center source coordinates, clamped to the valid range."""
    scale = in_len / out_len
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Resize with half-pixel-center bilinear interpolation.

    Accepts uint8 (H, W, 3) / (H, W) or planar float32 (C, H, W); identity
    resize of 8-bit images is bitwise exact.
    """
    if w < 1 or h < 1:
        raise ValueError(f"target size must be >= 1, got {w}x{h}")
    if img.dtype == np.uint8:
        in_h, in_w = img.shape[:2]
        plane = img.astype(np.float64)
        x0, x1, fx = _axis_coords(w, in_w)
        y0, y1, fy = _axis_coords(h, in_h)
        if img.ndim == 3:
            fx = fx[None, :, None]
            fy = fy[:, None, None]
        else:
            fx = fx[None, :]
            fy = fy[:, None]
        rows_a = plane[y0]
        rows_b = plane[y1]
        top = rows_a[:, x0] * (1 - fx) + rows_a[:, x1] * fx
        bot = rows_b[:, x0] * (1 - fx) + rows_b[:, x1] * fx
        return quantize_u8((top * (1 - fy) + bot * fy) / 255.0)
    if img.ndim != 3:
        raise ValueError("float images must be planar (C, H, W)")
    in_h, in_w = img.shape[1:]
    x0, x1, fx = _axis_coords(w, in_w)
    y0, y1, fy = _axis_coords(h, in_h)
    plane = img.astype(np.float64)
    rows_a = plane[:, y0]
    rows_b = plane[:, y1]
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    top = rows_a[:, :, x0] * (1 - fx) + rows_a[:, :, x1] * fx
    bot = rows_b[:, :, x0] * (1 - fx) + rows_b[:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def resize_nearest(mask: np.ndarray, w: int, h: int) -> np.ndarray:
    """Nearest-neighbor resize for masks; preserves the value set."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be >= 1, got {w}x{h}")
    in_h, in_w = mask.shape[:2]
    xs = np.minimum(((np.arange(w) + 0.5) * (in_w / w)).astype(np.int64), in_w - 1)
    ys = np.minimum(((np.arange(h) + 0.5) * (in_h / h)).astype(np.int64), in_h - 1)
    return np.ascontiguousarray(mask[ys][:, xs])


def crop(img: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Exact pixel copy of a rectangle that must lie fully inside the image."""
    if img.dtype == np.uint8:
        img_h, img_w = img.shape[:2]
    else:
        img_h, img_w = img.shape[-2:]
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > img_w or y + h > img_h:
        raise ValueError(f"crop rectangle ({x},{y},{w},{h}) not inside {img_w}x{img_h} image")
    if img.dtype == np.uint8:
        return np.ascontiguousarray(img[y : y + h, x : x + w])
    return np.ascontiguousarray(img[..., y : y + h, x : x + w])


# ---------------------------------------------------------------------------
# PNG I/O


def read_rgb8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_rgb8(path, img: np.ndarray) -> None:
    ensure_rgb8(img)
    Image.fromarray(img, mode="RGB").save(path, **_PNG_OPTS)


def read_gray8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_gray8(path, img: np.ndarray) -> None:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("grayscale PNG writer expects a uint8 (H, W) array")
    Image.fromarray(img, mode="L").save(path, **_PNG_OPTS)
