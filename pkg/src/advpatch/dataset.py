"""On-disk dataset ingestion: image/label pairing and letterboxing.

Labels are one text line per box, "class cx cy w h", normalized to the
original image. Ingestion validates everything it can without decoding
pixels (label syntax, value ranges, image headers) so a bad dataset
fails at the start of a run, not an hour in. Full pixel decode happens
lazily, one scene at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from PIL import Image

from .boxes import DETECTOR_INPUT_SIZE, BoundingBox, Scene
from .images import load_pixels
from .warp import resize_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
LETTERBOX_FILL = 0.5


class DatasetError(ValueError):
    """The dataset on disk cannot be ingested as described."""


class LabelParseError(DatasetError):
    """A label file line does not parse; message carries file and line."""


def letterbox_params(orig_w: int, orig_h: int,
                     size: int = DETECTOR_INPUT_SIZE) -> tuple[float, int, int]:
    """Aspect-preserving fit of (orig_w, orig_h) into a size x size square.

    Returns (scale, pad_left, pad_top) with the content centered.
    """
    if orig_w < 1 or orig_h < 1:
        raise DatasetError(f"degenerate image {orig_w}x{orig_h}")
    scale = size / max(orig_w, orig_h)
    new_w = max(1, round(orig_w * scale))
    new_h = max(1, round(orig_h * scale))
    return scale, (size - new_w) // 2, (size - new_h) // 2


def letterbox_image(pixels: torch.Tensor,
                    size: int = DETECTOR_INPUT_SIZE) -> torch.Tensor:
    """Resize onto a gray size x size canvas, aspect ratio preserved."""
    orig_h, orig_w = int(pixels.shape[0]), int(pixels.shape[1])
    scale, pad_left, pad_top = letterbox_params(orig_w, orig_h, size)
    new_w = max(1, round(orig_w * scale))
    new_h = max(1, round(orig_h * scale))
    canvas = torch.full((size, size, 3), LETTERBOX_FILL, dtype=pixels.dtype)
    canvas[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = \
        resize_image(pixels, new_h, new_w)
    return canvas


def letterbox_box(box: BoundingBox, orig_w: int, orig_h: int,
                  size: int = DETECTOR_INPUT_SIZE) -> BoundingBox:
    """Remap a box normalized to the original image into letterboxed space."""
    scale, pad_left, pad_top = letterbox_params(orig_w, orig_h, size)
    cx = (box.cx * orig_w * scale + pad_left) / size
    cy = (box.cy * orig_h * scale + pad_top) / size
    return BoundingBox(cx=cx, cy=cy,
                       w=box.w * orig_w * scale / size,
                       h=box.h * orig_h * scale / size,
                       class_id=box.class_id)


def parse_label_file(path: Path) -> list[BoundingBox]:
    """Boxes from one label file; every malformed line is a hard error."""
    boxes = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise LabelParseError(
                    f"{path}:{lineno}: expected 'class cx cy w h', got {line!r}")
            try:
                class_id = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError:
                raise LabelParseError(
                    f"{path}:{lineno}: non-numeric field in {line!r}") from None
            for name, value in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
                if not (0.0 <= value <= 1.0):
                    raise LabelParseError(
                        f"{path}:{lineno}: {name}={value} outside [0, 1]")
            if w == 0.0 or h == 0.0:
                raise LabelParseError(f"{path}:{lineno}: zero-extent box")
            boxes.append(BoundingBox(cx=cx, cy=cy, w=w, h=h, class_id=class_id))
    return boxes


@dataclass
class DatasetEntry:
    image_path: Path
    label_path: Path | None
    orig_w: int
    orig_h: int
    boxes: list[BoundingBox]  # already remapped into letterboxed coordinates


@dataclass
class DatasetIndex:
    """Validated dataset listing; pixel decode deferred to load_scene."""

    entries: list[DatasetEntry]
    input_size: int = DETECTOR_INPUT_SIZE
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def load_scene(self, i: int) -> Scene:
        entry = self.entries[i]
        pixels = load_pixels(entry.image_path)
        if (pixels.shape[0], pixels.shape[1]) != (entry.orig_h, entry.orig_w):
            raise DatasetError(
                f"{entry.image_path} changed size since ingest: header said "
                f"{entry.orig_w}x{entry.orig_h}, decoded "
                f"{pixels.shape[1]}x{pixels.shape[0]}")
        return Scene(image=letterbox_image(pixels, self.input_size),
                     boxes=list(entry.boxes),
                     source_path=str(entry.image_path))

    def load_all(self) -> list[Scene]:
        return [self.load_scene(i) for i in range(len(self.entries))]


class SceneView:
    """Sequence facade over a DatasetIndex with a bounded decode cache.

    Lets the training loop index scenes without holding the whole
    letterboxed dataset in memory.
    """

    def __init__(self, index: DatasetIndex, cache_size: int = 64):
        self._index = index
        self._cache: dict[int, Scene] = {}
        self._cache_size = max(0, cache_size)

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i: int) -> Scene:
        if i in self._cache:
            return self._cache[i]
        scene = self._index.load_scene(i)
        if self._cache_size:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = scene
        return scene


def ingest_dataset(images_dir, labels_dir,
                   size: int = DETECTOR_INPUT_SIZE) -> DatasetIndex:
    """Pair images with labels by stem and pre-validate the whole set.

    Images without a label file get zero boxes. Unreadable images are
    skipped and counted; losing more than 10% of the set aborts. Any
    malformed label line aborts immediately with its file and line.
    """
    images_dir = Path(images_dir)
    labels_dir = Path(labels_dir)
    if not images_dir.is_dir():
        raise DatasetError(f"images directory not found: {images_dir}")

    paths = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    entries = []
    skipped = []
    for path in paths:
        try:
            with Image.open(path) as im:
                orig_w, orig_h = im.size
                im.verify()
        except Exception:
            skipped.append(path.name)
            continue
        label_path = labels_dir / (path.stem + ".txt")
        if label_path.is_file():
            raw_boxes = parse_label_file(label_path)
        else:
            label_path = None
            raw_boxes = []
        boxes = [letterbox_box(b, orig_w, orig_h, size) for b in raw_boxes]
        entries.append(DatasetEntry(image_path=path, label_path=label_path,
                                    orig_w=orig_w, orig_h=orig_h, boxes=boxes))

    if paths and len(skipped) * 10 > len(paths):
        raise DatasetError(
            f"{len(skipped)} of {len(paths)} images unreadable (over 10%): "
            f"{', '.join(skipped[:5])}{'...' if len(skipped) > 5 else ''}")
    return DatasetIndex(entries=entries, input_size=size, skipped=skipped)
