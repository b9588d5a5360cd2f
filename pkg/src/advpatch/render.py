"""Pastes the transformed patch over person boxes to build adversarial scenes.

The patch is resized to a square whose side is scale * scale_mult * box
pixel height, then pasted centered on the box (plus an optional vertical
offset) through a binary mask. Everything outside the paste masks is left
bit-identical, and gradients flow from the rendered scene back to the
patch pixels through the bilinear resize.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .boxes import Scene
from .eot import SampledTransform, apply_transform
from .images import save_pixels
from .warp import resize_image


@dataclass
class RenderConfig:
    """Patch sizing and placement relative to each person box."""

    scale: float = 0.5
    vertical_offset: float = 0.0  # fraction of box height; 0 is box-centered

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"render scale must be positive, got {self.scale}")


def render_detailed(scene: Scene, patch, t: SampledTransform, cfg: RenderConfig):
    """Render and also report paste rectangles and the skipped-box count.

    Returns (rendered Scene, list of (x0, y0, x1, y1) pixel rects, skipped).
    Boxes whose patch side would round below 2 px are skipped and counted.
    Overlapping boxes paint in list order, so later boxes win.
    """
    height, width = scene.height, scene.width
    transformed = apply_transform(patch, t)
    out = scene.image.clone()
    rects: list[tuple[int, int, int, int]] = []
    skipped = 0

    for box in scene.boxes:
        box_h_px = box.h * height
        side = int(round(cfg.scale * t.scale_mult * box_h_px))
        if side < 2:
            skipped += 1
            continue
        center_x = box.cx * width
        center_y = box.cy * height + cfg.vertical_offset * box_h_px
        x0 = int(round(center_x - side / 2))
        y0 = int(round(center_y - side / 2))
        x1 = x0 + side
        y1 = y0 + side

        cx0, cy0 = max(0, x0), max(0, y0)
        cx1, cy1 = min(width, x1), min(height, y1)
        if cx0 >= cx1 or cy0 >= cy1:
            skipped += 1
            continue

        resized = resize_image(transformed, side, side)
        out[cy0:cy1, cx0:cx1, :] = resized[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0, :]
        rects.append((cx0, cy0, cx1, cy1))

    rendered = Scene(image=out, boxes=scene.boxes, source_path=scene.source_path)
    return rendered, rects, skipped


def render(scene: Scene, patch, t: SampledTransform, cfg: RenderConfig) -> Scene:
    """Place the transformed patch over every person box of the scene."""
    rendered, _, _ = render_detailed(scene, patch, t, cfg)
    return rendered


def write_render_preview(scene: Scene, rects, png_path: str | os.PathLike) -> None:
    """Dump a rendered scene as PNG plus a sidecar text file of paste rects."""
    save_pixels(scene.image, png_path)
    sidecar = f"{png_path}.rects.txt"
    with open(sidecar, "w") as fh:
        for x0, y0, x1, y1 in rects:
            fh.write(f"{x0} {y0} {x1} {y1}\n")
