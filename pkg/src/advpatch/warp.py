"""Differentiable bilinear sampling shared by the warp, rotation, and resize ops.

Coordinates follow image convention: x indexes columns (width), y indexes
rows (height), and integer coordinates land on pixel centers. Samples
outside the image clamp to the nearest edge pixel, so a constant image is
invariant under any warp built on these helpers.
"""

from __future__ import annotations

import math

import torch


def bilinear_sample(pixels: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) image at fractional (x, y) coordinates.

    x and y must share a shape; the result has that shape plus the channel
    axis. Gradients flow to ``pixels`` (the sample is linear in them).
    """
    height, width = pixels.shape[0], pixels.shape[1]
    x = x.clamp(0.0, float(width - 1))
    y = y.clamp(0.0, float(height - 1))

    x0 = x.floor()
    y0 = y.floor()
    x1 = (x0 + 1).clamp(max=float(width - 1))
    y1 = (y0 + 1).clamp(max=float(height - 1))

    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)

    x0l = x0.long()
    x1l = x1.long()
    y0l = y0.long()
    y1l = y1.long()

    top = pixels[y0l, x0l] * (1 - wx) + pixels[y0l, x1l] * wx
    bottom = pixels[y1l, x0l] * (1 - wx) + pixels[y1l, x1l] * wx
    return top * (1 - wy) + bottom * wy


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None):
    """Coordinate grids (xs, ys), each (H, W), at pixel centers."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return xs, ys


def rotate_image(pixels: torch.Tensor, angle_deg: float) -> torch.Tensor:
    """Rotate an (H, W, C) image about its center with bilinear sampling.

    Zero angle is an exact passthrough so identity transforms stay
    bit-identical.
    """
    if angle_deg == 0.0:
        return pixels
    height, width = pixels.shape[0], pixels.shape[1]
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)

    xs, ys = pixel_grid(height, width, dtype=pixels.dtype, device=pixels.device)
    dx = xs - cx
    dy = ys - cy
    # inverse map: rotate output coords by -angle to find source coords
    src_x = cos_t * dx + sin_t * dy + cx
    src_y = -sin_t * dx + cos_t * dy + cy
    return bilinear_sample(pixels, src_x, src_y)


def resize_image(pixels: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of an (H, W, C) image (half-pixel-center mapping).

    Identity when the output size equals the input size.
    """
    in_h, in_w = pixels.shape[0], pixels.shape[1]
    if out_h == in_h and out_w == in_w:
        return pixels
    dtype = pixels.dtype if pixels.dtype.is_floating_point else torch.float32
    sx = in_w / out_w
    sy = in_h / out_h
    xs = (torch.arange(out_w, dtype=dtype, device=pixels.device) + 0.5) * sx - 0.5
    ys = (torch.arange(out_h, dtype=dtype, device=pixels.device) + 0.5) * sy - 0.5
    grid_x = xs.unsqueeze(0).expand(out_h, out_w)
    grid_y = ys.unsqueeze(1).expand(out_h, out_w)
    return bilinear_sample(pixels, grid_x, grid_y)
