"""Expectation-over-transformation augmentation for the patch.

Each training step draws one random transform per scene: a crease field
(non-rigid), a rotation and render-scale jitter (rigid), and pixel-wise
appearance changes (noise, contrast, brightness). Applying the same patch
under many sampled transforms is what makes the optimized patch survive
real-world distortions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .creases import Crease, CreaseFieldConfig, apply_creases, sample_crease_field
from .images import as_pixels
from .warp import rotate_image


@dataclass
class EOTConfig:
    """Bounds for the per-step transform distributions."""

    rotation_deg: float = 20.0
    noise_amp: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_amp: float = 0.1
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    rng_seed: int = 0

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ValueError("rotation bound must be nonnegative")
        for name, (lo, hi) in (("contrast_range", self.contrast_range),
                               ("scale_jitter", self.scale_jitter)):
            if not (0 < lo <= hi):
                raise ValueError(f"{name} needs 0 < lo <= hi, got ({lo}, {hi})")


@dataclass
class SampledTransform:
    """One concrete draw from the EOT + crease distributions."""

    angle: float = 0.0
    scale_mult: float = 1.0
    noise_field: torch.Tensor | None = None  # (H, W, 3) in [-amp, amp]
    contrast: float = 1.0
    brightness: float = 0.0
    creases: list[Crease] = field(default_factory=list)


IDENTITY_TRANSFORM = SampledTransform()


def eot_off() -> EOTConfig:
    """Degenerate bounds: every draw is the identity rigid/appearance map."""
    return EOTConfig(rotation_deg=0.0, noise_amp=0.0, contrast_range=(1.0, 1.0),
                     brightness_amp=0.0, scale_jitter=(1.0, 1.0))


def sample_transform(config: EOTConfig, crease_config: CreaseFieldConfig,
                     patch_dims: tuple[int, int],
                     generator: torch.Generator | None = None) -> SampledTransform:
    """Draw one transform with every field uniform within its bounds.

    Deterministic given ``config.rng_seed``; pass ``generator`` to draw
    from an existing stream. ``patch_dims`` is (width, height) and sizes
    the per-pixel noise field.
    """
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(config.rng_seed)
    width, height = patch_dims

    draw = torch.rand(4, generator=generator, dtype=torch.float64)
    angle = float((draw[0] * 2 - 1) * config.rotation_deg)
    scale_lo, scale_hi = config.scale_jitter
    scale_mult = float(draw[1] * (scale_hi - scale_lo) + scale_lo)
    con_lo, con_hi = config.contrast_range
    contrast = float(draw[2] * (con_hi - con_lo) + con_lo)
    brightness = float((draw[3] * 2 - 1) * config.brightness_amp)

    noise = (torch.rand(height, width, 3, generator=generator) * 2 - 1) * config.noise_amp
    creases = sample_crease_field(crease_config, patch_dims, generator=generator)
    return SampledTransform(angle=angle, scale_mult=scale_mult, noise_field=noise,
                            contrast=contrast, brightness=brightness, creases=creases)


def apply_transform(patch, t: SampledTransform) -> torch.Tensor:
    """Apply one sampled transform to the patch pixels.

    Order: crease warp, then rotation about the patch center, then the
    pixel-wise appearance map clamp(contrast * p + brightness + noise).
    ``scale_mult`` is not consumed here; the renderer folds it into the
    paste size. Output values stay in [0, 1] and gradients flow back to
    the input pixels. The all-default transform is an exact no-op.
    """
    pixels = as_pixels(patch)
    out = apply_creases(pixels, t.creases)
    out = rotate_image(out, t.angle)
    if t.contrast != 1.0 or t.brightness != 0.0 or t.noise_field is not None:
        shifted = t.contrast * out + t.brightness
        if t.noise_field is not None:
            if tuple(t.noise_field.shape) != tuple(out.shape):
                raise ValueError(
                    f"noise field {tuple(t.noise_field.shape)} does not match "
                    f"patch {tuple(out.shape)}")
            shifted = shifted + t.noise_field.to(out.dtype)
        out = shifted.clamp(0.0, 1.0)
    return out
