"""Seeded synthetic scenes for desk-scale runs and CI.

Each scene is a soft gradient background with distractor shapes plus one
to three "person" figures: a skin-tone head disk over a shirt torso and
trouser legs. The layout is regular enough for a small detector to learn
yet rich enough that attacks and occlusions behave like the real task.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .boxes import BoundingBox, Scene
from .images import save_pixels

SKIN_TONE = np.array([0.87, 0.72, 0.58])


def _coord_grids(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs, ys


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.25, 0.75, size=3)
    c1 = rng.uniform(0.25, 0.75, size=3)
    axis = rng.integers(0, 2)
    ramp = np.linspace(0.0, 1.0, size)
    if axis == 0:
        ramp2d = np.repeat(ramp[:, None], size, axis=1)
    else:
        ramp2d = np.repeat(ramp[None, :], size, axis=0)
    img = c0[None, None, :] * (1 - ramp2d[..., None]) + c1[None, None, :] * ramp2d[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _add_distractors(rng: np.random.Generator, img: np.ndarray, count: int) -> None:
    size = img.shape[0]
    xs, ys = _coord_grids(size)
    for _ in range(count):
        color = rng.uniform(0.0, 1.0, size=3)
        kind = rng.integers(0, 3)
        cx, cy = rng.uniform(0, size, size=2)
        extent = rng.uniform(12, 60)
        if kind == 0:  # disk
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= extent ** 2
        elif kind == 1:  # axis-aligned rectangle
            w, h = extent, rng.uniform(12, 60)
            mask = (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
        else:  # right triangle
            mask = (xs - cx >= 0) & (ys - cy >= 0) & ((xs - cx) + (ys - cy) <= extent)
        img[mask] = color


def _draw_person(rng: np.random.Generator, img: np.ndarray,
                 box_h: float, cx: float, cy: float) -> BoundingBox:
    """Draw head + shirt + legs; returns the tight normalized box."""
    size = img.shape[0]
    xs, ys = _coord_grids(size)
    box_w = box_h * rng.uniform(0.36, 0.46)
    top = cy - box_h / 2
    bottom = cy + box_h / 2
    left = cx - box_w / 2
    right = cx + box_w / 2

    head_r = 0.14 * box_h
    head_cy = top + head_r
    shirt_top = top + 2 * head_r
    legs_top = top + 0.58 * box_h

    shirt = rng.uniform(0.05, 0.95, size=3)
    pants = rng.uniform(0.05, 0.6, size=3)
    skin = np.clip(SKIN_TONE + rng.normal(0, 0.03, size=3), 0, 1)

    torso_l = left + 0.08 * box_w
    torso_r = right - 0.08 * box_w
    shirt_mask = (xs >= torso_l) & (xs < torso_r) & (ys >= shirt_top) & (ys < legs_top)
    img[shirt_mask] = shirt

    leg_w = 0.32 * (torso_r - torso_l)
    left_leg = (xs >= torso_l) & (xs < torso_l + leg_w) & (ys >= legs_top) & (ys < bottom)
    right_leg = (xs >= torso_r - leg_w) & (xs < torso_r) & (ys >= legs_top) & (ys < bottom)
    img[left_leg | right_leg] = pants

    head_mask = (xs - cx) ** 2 + (ys - head_cy) ** 2 <= head_r ** 2
    img[head_mask] = skin

    return BoundingBox(cx=cx / size, cy=cy / size, w=box_w / size, h=box_h / size,
                       class_id=0)


def make_scene(rng: np.random.Generator, size: int = 416,
               min_persons: int = 1, max_persons: int = 3,
               distractors: int = 6) -> Scene:
    img = _background(rng, size)
    _add_distractors(rng, img, int(rng.integers(distractors // 2, distractors + 1)))

    n_persons = int(rng.integers(min_persons, max_persons + 1))
    boxes: list[BoundingBox] = []
    attempts = 0
    while len(boxes) < n_persons and attempts < 50:
        attempts += 1
        box_h = rng.uniform(120, 260)
        margin = box_h / 2 + 4
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        candidate_w = box_h * 0.46
        # keep persons separated so every label is unambiguous
        clash = any(abs(cx - b.cx * size) < (candidate_w + b.w * size) * 0.6
                    and abs(cy - b.cy * size) < (box_h + b.h * size) * 0.55
                    for b in boxes)
        if clash:
            continue
        boxes.append(_draw_person(rng, img, box_h, cx, cy))

    image = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    return Scene(image=image, boxes=boxes, source_path="synthetic")


def make_toy_scenes(count: int, seed: int, size: int = 416,
                    min_persons: int = 1, max_persons: int = 3) -> list[Scene]:
    """Deterministic list of synthetic scenes for the given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [make_scene(rng, size=size, min_persons=min_persons,
                       max_persons=max_persons) for _ in range(count)]


def make_guide_image(size: int, seed: int) -> torch.Tensor:
    """A smooth benign target image: blurred random color blobs."""
    rng = np.random.Generator(np.random.PCG64(seed))
    img = np.zeros((size, size, 3))
    xs, ys = _coord_grids(size)
    base = rng.uniform(0.2, 0.8, size=3)
    img[:] = base
    for _ in range(6):
        color = rng.uniform(0.0, 1.0, size=3)
        cx, cy = rng.uniform(0, size, size=2)
        sigma = rng.uniform(size / 8, size / 3)
        blob = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2)))
        img += blob[..., None] * (color - img) * 0.8
    return torch.from_numpy(np.clip(img, 0, 1).astype(np.float32))


def write_toy_dataset(root: str | os.PathLike, count: int, seed: int,
                      size: int = 416) -> None:
    """Write a scenes-on-disk copy (images/ + labels/) for CLI ingestion."""
    images_dir = os.path.join(root, "images")
    labels_dir = os.path.join(root, "labels")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)
    scenes = make_toy_scenes(count, seed, size=size)
    for i, scene in enumerate(scenes):
        stem = f"scene_{i:04d}"
        save_pixels(scene.image, os.path.join(images_dir, stem + ".png"))
        with open(os.path.join(labels_dir, stem + ".txt"), "w") as fh:
            for b in scene.boxes:
                fh.write(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")
