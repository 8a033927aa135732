"""Polygon annotation ingestion: scanline rasterization and class collapse.

Label masks are uint8 (H, W) arrays of class ids: 0 background, 1 human body,
2..31 reserved object categories.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

MAX_CLASSES = 32

# Two-class collapse: objects become background, the body class survives.
DEFAULT_COLLAPSE = {i: (1 if i == 1 else 0) for i in range(MAX_CLASSES)}


@dataclass
class PolygonAnnotation:
    """One labeled polygon; later ``z_order`` paints over earlier."""

    class_id: int
    vertices: list = field(default_factory=list)  # [(x, y), ...] in pixels
    z_order: int = 0

    def __post_init__(self):
        if not (0 <= self.class_id < MAX_CLASSES):
            raise ValueError(f"class_id must be in [0, {MAX_CLASSES}), got {self.class_id}")

    def is_degenerate(self) -> bool:
        """Fewer than 3 vertices, or all vertices collinear."""
        if len(self.vertices) < 3:
            return True
        pts = np.asarray(self.vertices, dtype=np.float64)
        v0 = pts[1:] - pts[0]
        cross = v0[:-1, 0] * v0[1:, 1] - v0[:-1, 1] * v0[1:, 0]
        return bool(np.all(np.abs(cross) < 1e-12))


def rasterize(annotations, w: int, h: int) -> np.ndarray:
    """Paint polygons into a label mask with even-odd scanline fill.

    Pixel-center sampling: pixel (x, y) is inside when its center
    (x+0.5, y+0.5) is, with half-open spans so a center exactly on an edge
    counts for the left/top side only. Polygons paint in ascending z_order;
    degenerate polygons are skipped with a warning.
    """
    if w < 1 or h < 1:
        raise ValueError(f"mask size must be >= 1x1, got {w}x{h}")
    mask = np.zeros((h, w), dtype=np.uint8)
    for ann in sorted(annotations, key=lambda a: a.z_order):
        if ann.is_degenerate():
            warnings.warn(
                f"skipping degenerate polygon (class {ann.class_id}, "
                f"{len(ann.vertices)} vertices)",
                stacklevel=2,
            )
            continue
        _fill_polygon(mask, ann.vertices, ann.class_id, w, h)
    return mask


def _fill_polygon(mask, vertices, value, w, h):
    pts = np.asarray(vertices, dtype=np.float64)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, float(w))
    pts[:, 1] = np.clip(pts[:, 1], 0.0, float(h))
    y_lo = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
    y_hi = min(int(np.ceil(pts[:, 1].max() + 0.5)), h - 1)
    n = len(pts)
    for y in range(y_lo, y_hi + 1):
        cy = y + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            # Half-open in y: an edge contributes on [min_y, max_y).
            if (y1 <= cy < y2) or (y2 <= cy < y1):
                crossings.append(x1 + (cy - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for a, b in zip(crossings[::2], crossings[1::2]):
            # Centers cx in [a, b): x >= a - 0.5 and x < b - 0.5.
            x_start = max(int(np.ceil(a - 0.5)), 0)
            x_end = min(int(np.ceil(b - 0.5)) - 1, w - 1)
            if x_end >= x_start:
                mask[y, x_start : x_end + 1] = value


def collapse(mask: np.ndarray, class_map: dict = None) -> np.ndarray:
    """Relabel every pixel through the class map (default: objects -> background)."""
    if class_map is None:
        class_map = DEFAULT_COLLAPSE
    lut = np.full(256, -1, dtype=np.int16)
    for src, dst in class_map.items():
        if not (0 <= dst < MAX_CLASSES):
            raise ValueError(f"class map target {dst} out of range")
        lut[src] = dst
    out = lut[mask]
    if (out < 0).any():
        missing = int(mask[(out < 0)].flat[0])
        raise ValueError(f"mask contains class id {missing} with no mapping")
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# Annotation JSON (one document per image)


def annotations_to_json(image_name: str, w: int, h: int, annotations) -> str:
    doc = {
        "image": image_name,
        "width": w,
        "height": h,
        "polygons": [
            {
                "class_id": a.class_id,
                "z_order": a.z_order,
                "vertices": [[float(x), float(y)] for x, y in a.vertices],
            }
            for a in annotations
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def annotations_from_json(text: str):
    """Parse an annotation document; returns (image_name, width, height, annotations)."""
    doc = json.loads(text)
    for key in ("image", "width", "height", "polygons"):
        if key not in doc:
            raise ValueError(f"annotation document missing required key {key!r}")
    anns = [
        PolygonAnnotation(
            class_id=int(p["class_id"]),
            vertices=[(float(x), float(y)) for x, y in p["vertices"]],
            z_order=int(p.get("z_order", 0)),
        )
        for p in doc["polygons"]
    ]
    return doc["image"], int(doc["width"]), int(doc["height"]), anns
