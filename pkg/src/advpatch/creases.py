"""Non-rigid crease warps that model cloth wrinkles.

Each crease is an anchor point plus a 2D vector. Every pixel moves in the
vector's direction, scaled by a multiplier that falls off with squared
distance from the anchor and with the angle between the pixel's offset
direction and the crease vector:

    multiplier(x, y) = 1 - sin^2(theta) * [(x-x0)^2 + (y-y0)^2] / (w^2 + h^2)

Pixels on the crease line (theta = 0) move at full magnitude; the factor
stays in [0, 1] for every in-bounds pixel. The warp is implemented as an
inverse (backward) bilinear resample so it is differentiable and hole-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .images import as_pixels
from .warp import bilinear_sample, pixel_grid

CREASE_VECTOR_BOUND = 5.0


@dataclass
class Crease:
    """One crease: anchor point and displacement vector, both in pixels."""

    anchor: tuple[float, float]
    vector: tuple[float, float]

    def __post_init__(self):
        dx, dy = self.vector
        if abs(dx) > CREASE_VECTOR_BOUND or abs(dy) > CREASE_VECTOR_BOUND:
            raise ValueError(
                f"crease vector components must lie in [-{CREASE_VECTOR_BOUND}, "
                f"{CREASE_VECTOR_BOUND}], got {self.vector}")


@dataclass
class CreaseFieldConfig:
    """How many creases to draw per sample, and the seed that draws them."""

    creases_min: int = 1
    creases_max: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if not (0 <= self.creases_min <= self.creases_max):
            raise ValueError(
                f"need 0 <= creases_min <= creases_max, got "
                f"[{self.creases_min}, {self.creases_max}]")


def no_creases() -> CreaseFieldConfig:
    """Config whose every sample is the empty crease list."""
    return CreaseFieldConfig(creases_min=0, creases_max=0)


def crease_multiplier(point: tuple[float, float], crease: Crease,
                      patch_dims: tuple[int, int]) -> float:
    """Displacement multiplier for one pixel under one crease.

    ``patch_dims`` is (width, height). At the anchor the offset direction
    is undefined and the multiplier is 1 by continuity (the distance
    factor is zero there regardless of the angle).
    """
    width, height = patch_dims
    if width <= 0 or height <= 0:
        raise ValueError(f"patch_dims must be positive, got {patch_dims}")
    vx, vy = crease.vector
    v_norm = math.hypot(vx, vy)
    if v_norm == 0.0:
        raise ValueError("crease vector must have nonzero length")
    x, y = point
    x0, y0 = crease.anchor
    dx = x - x0
    dy = y - y0
    dist_sq = dx * dx + dy * dy
    if dist_sq == 0.0:
        return 1.0
    cross = dx * vy - dy * vx
    sin_sq = (cross / (math.sqrt(dist_sq) * v_norm)) ** 2
    return 1.0 - sin_sq * dist_sq / (width * width + height * height)


def crease_displacement_field(creases: list[Crease], height: int, width: int,
                              dtype=torch.float32, device=None):
    """Summed per-pixel displacement (disp_x, disp_y), each (H, W).

    Uses the identity sin^2(theta) * dist^2 = cross(d, v)^2 / |v|^2, which
    sidesteps the 0/0 at the anchor and matches crease_multiplier exactly.
    """
    xs, ys = pixel_grid(height, width, dtype=dtype, device=device)
    disp_x = torch.zeros_like(xs)
    disp_y = torch.zeros_like(ys)
    diag_sq = float(width * width + height * height)
    for crease in creases:
        vx, vy = crease.vector
        v_norm_sq = vx * vx + vy * vy
        if v_norm_sq == 0.0:
            raise ValueError("crease vector must have nonzero length")
        x0, y0 = crease.anchor
        dx = xs - x0
        dy = ys - y0
        cross = dx * vy - dy * vx
        mult = 1.0 - (cross * cross) / (v_norm_sq * diag_sq)
        disp_x = disp_x + vx * mult
        disp_y = disp_y + vy * mult
    return disp_x, disp_y


def apply_creases(patch, creases: list[Crease]):
    """Warp a patch by the summed crease displacement field.

    The output pixel at (x, y) samples the input at (x, y) minus the
    summed displacement (inverse warping), with bilinear interpolation and
    edge clamping, so gradients flow back to the input pixels. An empty
    crease list returns the patch unchanged.
    """
    pixels = as_pixels(patch)
    if pixels.shape[0] < 2 or pixels.shape[1] < 2:
        raise ValueError(f"degenerate patch {tuple(pixels.shape)}")
    if len(creases) == 0:
        return pixels
    height, width = pixels.shape[0], pixels.shape[1]
    disp_x, disp_y = crease_displacement_field(
        creases, height, width, dtype=pixels.dtype, device=pixels.device)
    xs, ys = pixel_grid(height, width, dtype=pixels.dtype, device=pixels.device)
    return bilinear_sample(pixels, xs - disp_x, ys - disp_y)


def sample_crease_field(config: CreaseFieldConfig, patch_dims: tuple[int, int],
                        generator: torch.Generator | None = None) -> list[Crease]:
    """Draw a random crease list: uniform count in [min, max], uniform
    anchors inside the patch, uniform vector components in the +-5 bound.

    Deterministic given ``config.rng_seed``; pass ``generator`` to draw
    from a longer-lived stream instead (the trainer does).
    """
    width, height = patch_dims
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(config.rng_seed)
    count = int(torch.randint(config.creases_min, config.creases_max + 1, (1,),
                              generator=generator).item())
    creases = []
    for _ in range(count):
        draw = torch.rand(4, generator=generator, dtype=torch.float64)
        anchor = (float(draw[0] * (width - 1)), float(draw[1] * (height - 1)))
        vx = float((draw[2] * 2 - 1) * CREASE_VECTOR_BOUND)
        vy = float((draw[3] * 2 - 1) * CREASE_VECTOR_BOUND)
        if vx == 0.0 and vy == 0.0:
            vx = 1e-6  # zero-length vectors are invalid; nudge the null draw
        creases.append(Crease(anchor=(anchor[0], anchor[1]), vector=(vx, vy)))
    return creases


def creases_to_text(creases: list[Crease], seed: int | None = None) -> str:
    """Serialize a crease field to a plain-text record for reproducible runs."""
    lines = []
    if seed is not None:
        lines.append(f"seed {seed}")
    for c in creases:
        lines.append(f"{c.anchor[0]!r} {c.anchor[1]!r} {c.vector[0]!r} {c.vector[1]!r}")
    return "\n".join(lines) + "\n"


def creases_from_text(text: str) -> tuple[list[Crease], int | None]:
    """Parse the record written by creases_to_text. Returns (creases, seed)."""
    creases = []
    seed = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("seed "):
            seed = int(line.split()[1])
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"bad crease record line: {raw!r}")
        x0, y0, dx, dy = (float(p) for p in parts)
        creases.append(Crease(anchor=(x0, y0), vector=(dx, dy)))
    return creases, seed
