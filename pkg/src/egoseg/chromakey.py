"""Green-screen foreground extraction and the skin-color baseline segmenter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imagecore import StructuringElement, ensure_rgb8, opening, rgb_to_hsv


@dataclass(frozen=True)
class ChromaRange:
    """HSV box used for color keying.

    ``hue_min``/``hue_max`` are degrees with 0 <= hue_min < hue_max < 360;
    saturation and value bounds are in [0, 1]. ``sat_max``/``val_max`` default
    to 1.0 so a plain lower-bounded range needs only the first four fields.
    """

    hue_min: float
    hue_max: float
    sat_min: float = 0.0
    val_min: float = 0.0
    sat_max: float = 1.0
    val_max: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.hue_min < self.hue_max < 360.0):
            raise ValueError(f"need 0 <= hue_min < hue_max < 360, got [{self.hue_min}, {self.hue_max}]")
        for name in ("sat_min", "val_min", "sat_max", "val_max"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        """Boolean (H, W) membership test on a planar HSV image."""
        h, s, v = hsv[0], hsv[1], hsv[2]
        return (
            (h >= self.hue_min)
            & (h <= self.hue_max)
            & (s >= self.sat_min)
            & (s <= self.sat_max)
            & (v >= self.val_min)
            & (v <= self.val_max)
        )


# Studio chroma green; excludes dim or washed-out greens. All bounds are
# configurable through the toolkit config.
DEFAULT_GREEN_RANGE = ChromaRange(hue_min=90.0, hue_max=150.0, sat_min=0.30, val_min=0.15)

# Skin tones straddle the hue wraparound, so the default is two ranges ORed.
DEFAULT_SKIN_RANGES = (
    ChromaRange(hue_min=0.0, hue_max=50.0, sat_min=0.15, sat_max=0.75, val_min=0.25),
    ChromaRange(hue_min=340.0, hue_max=359.999, sat_min=0.15, sat_max=0.75, val_min=0.25),
)


def extract_foreground_mask(img: np.ndarray, chroma: ChromaRange = DEFAULT_GREEN_RANGE) -> np.ndarray:
    """Separate the subject from a green backdrop.

    Pixels inside the chroma range are background (0), everything else is
    foreground (1). A single opening pass (radius 1) removes keying speckle.
    """
    ensure_rgb8(img)
    hsv = rgb_to_hsv(img)
    fg = (~chroma.contains(hsv)).astype(np.uint8)
    return opening(fg, StructuringElement(radius=1, shape="square"))


def skin_baseline_segment(
    img: np.ndarray,
    ranges: ChromaRange | Sequence[ChromaRange] = DEFAULT_SKIN_RANGES,
) -> np.ndarray:
    """Naive color-threshold segmenter used only for qualitative comparison.

    Polarity is opposite to :func:`extract_foreground_mask`: pixels inside the
    skin range(s) are foreground (1).
    """
    ensure_rgb8(img)
    if isinstance(ranges, ChromaRange):
        ranges = (ranges,)
    hsv = rgb_to_hsv(img)
    hit = np.zeros(hsv.shape[1:], dtype=bool)
    for rng in ranges:
        hit |= rng.contains(hsv)
    return hit.astype(np.uint8)
