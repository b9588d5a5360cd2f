"""Bounding boxes, scenes, and box geometry helpers.

Boxes are stored in normalized center format (cx, cy, w, h in [0, 1]);
pixel-space conversions happen at the point of use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

DETECTOR_INPUT_SIZE = 416


@dataclass
class BoundingBox:
    """One object box in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent, got w={self.w} h={self.h}")

    def to_xyxy(self, image_w: int, image_h: int) -> tuple[float, float, float, float]:
        """Corner coordinates in pixels for an image_w x image_h image."""
        half_w = 0.5 * self.w * image_w
        half_h = 0.5 * self.h * image_h
        cx = self.cx * image_w
        cy = self.cy * image_h
        return (cx - half_w, cy - half_h, cx + half_w, cy + half_h)


@dataclass
class Scene:
    """One dataset image at detector resolution plus its person boxes."""

    image: torch.Tensor  # (H, W, 3) float in [0, 1]
    boxes: list[BoundingBox] = field(default_factory=list)
    source_path: str = ""

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def iou_xyxy(a: tuple[float, float, float, float],
             b: tuple[float, float, float, float]) -> float:
    """Intersection-over-union of two corner-format boxes."""
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou(a: BoundingBox, b: BoundingBox, image_w: int = DETECTOR_INPUT_SIZE,
            image_h: int = DETECTOR_INPUT_SIZE) -> float:
    """IoU between two normalized boxes (scale cancels, size kept for clarity)."""
    return iou_xyxy(a.to_xyxy(image_w, image_h), b.to_xyxy(image_w, image_h))
