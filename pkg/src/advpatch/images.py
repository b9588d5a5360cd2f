"""Patch and guide image containers with 8-bit PNG round-tripping.

All images in this package are torch tensors of shape (H, W, 3) holding
reals in [0, 1]. PNG serialization maps [0, 1] linearly onto 8-bit, so a
save/load round trip is exact to within 1/255 per channel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image


class ShapeMismatchError(ValueError):
    """Raised when a patch/guide pair does not share one pixel grid."""


def as_pixels(image) -> torch.Tensor:
    """Unwrap PatchImage/GuideImage to the raw (H, W, 3) tensor."""
    if isinstance(image, (PatchImage, GuideImage)):
        return image.pixels
    if isinstance(image, torch.Tensor):
        return image
    raise TypeError(f"expected image tensor or Patch/GuideImage, got {type(image)!r}")


def check_pixels(pixels: torch.Tensor, what: str = "image") -> torch.Tensor:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeMismatchError(f"{what} must be (H, W, 3), got {tuple(pixels.shape)}")
    return pixels


def load_pixels(path: str | os.PathLike) -> torch.Tensor:
    """Load an image file as a float32 (H, W, 3) tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def save_pixels(pixels: torch.Tensor, path: str | os.PathLike) -> None:
    """Write a [0, 1] image tensor as an 8-bit PNG (or per-extension format)."""
    arr = pixels.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).cpu().numpy()
    Image.fromarray(arr, mode="RGB").save(path)


@dataclass
class PatchImage:
    """The optimized perturbation: an (H, W, 3) buffer in [0, 1].

    The pixel tensor may carry gradient state; shape is fixed for the
    lifetime of one attack run.
    """

    pixels: torch.Tensor

    def __post_init__(self):
        check_pixels(self.pixels, "patch")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def requires_grad(self) -> bool:
        return self.pixels.requires_grad

    def clamp_(self) -> "PatchImage":
        """Project pixel values back to [0, 1] in place (feasibility step)."""
        with torch.no_grad():
            self.pixels.clamp_(0.0, 1.0)
        return self

    def save_png(self, path: str | os.PathLike) -> None:
        save_pixels(self.pixels, path)

    @classmethod
    def load_png(cls, path: str | os.PathLike) -> "PatchImage":
        return cls(load_pixels(path))


@dataclass
class GuideImage:
    """Benign target image the patch is steered to resemble."""

    pixels: torch.Tensor

    def __post_init__(self):
        check_pixels(self.pixels, "guide")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def save_png(self, path: str | os.PathLike) -> None:
        save_pixels(self.pixels, path)

    @classmethod
    def load_png(cls, path: str | os.PathLike) -> "GuideImage":
        return cls(load_pixels(path))
