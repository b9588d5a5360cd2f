"""Attack measurement: clean-detections-as-ground-truth mAP, ASR, recall.

The protocol treats each detector's own detections on the clean dataset
as ground truth, then reports average precision at IoU 0.5 for the person
class when the same detector looks at patched (and optionally defended)
images. Attack success rate is 100 minus that mAP. Clean images evaluated
against their own detections are the protocol's fixed point: exactly 100.
"""

from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import median_filter

from .boxes import BoundingBox, Scene, iou_xyxy
from .creases import CreaseFieldConfig, no_creases, sample_crease_field
from .detectors import DetectorHandle, detect, detection_score
from .eot import EOTConfig, SampledTransform, sample_transform
from .render import RenderConfig, render


class ProtocolError(ValueError):
    """Ground truth and evaluation detector do not match."""


DEFENSE_GRIDS = {
    "jpeg": (90, 70, 50, 30),
    "gaussian_noise": (0.01, 0.02, 0.05, 0.1),
    # the published blur params 10 and 20 are even; nearest odd kernels stand in
    "median_blur": (5, 11, 15, 21),
}


@dataclass
class DefenseConfig:
    """One input-transformation defense applied before detection."""

    kind: str  # jpeg | gaussian_noise | median_blur
    param: float

    def __post_init__(self):
        if self.kind not in DEFENSE_GRIDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "jpeg" and not (1 <= int(self.param) <= 100):
            raise ValueError(f"jpeg quality must be in [1, 100], got {self.param}")
        if self.kind == "gaussian_noise" and self.param < 0:
            raise ValueError(f"noise std must be nonnegative, got {self.param}")
        if self.kind == "median_blur":
            k = int(self.param)
            if k != self.param or k < 1 or k % 2 == 0:
                raise ValueError(f"median blur kernel must be odd, got {self.param}")

    def describe(self) -> str:
        return f"{self.kind}({self.param:g})"


@dataclass
class TransformStack:
    """What gets applied to the patch at evaluation time."""

    creases: CreaseFieldConfig | None = None
    eot: EOTConfig | None = None
    seed: int = 0

    def describe(self, render_scale: float | None = None) -> str:
        parts = []
        if render_scale is not None:
            parts.append(f"scale={render_scale:g}")
        if self.eot is not None:
            parts.append("eot")
        if self.creases is not None:
            parts.append("creases")
        if not parts:
            return "none"
        return "+".join(parts)


@dataclass
class GroundTruth:
    """Clean-scene detections that stand in for annotations."""

    detector_name: str
    boxes_per_image: list[list[BoundingBox]]


@dataclass
class EvalReport:
    """One measurement row: detector x patch x transform stack x defense."""

    detector_name: str
    map_50: float  # percent
    asr: float  # percent, always 100 - map_50
    recall: float  # percent of ground-truth boxes recovered
    n_images: int
    transform_stack: str = "none"
    defense: tuple[str, float] | None = None
    conf_threshold: float = 0.5


def build_ground_truth(detector: DetectorHandle, scenes: list[Scene]) -> GroundTruth:
    """Run post-processed detection on clean scenes; survivors become GT."""
    boxes = [[d.box for d in detect(detector, scene)] for scene in scenes]
    return GroundTruth(detector_name=detector.name, boxes_per_image=boxes)


def apply_defense(image: torch.Tensor, defense: DefenseConfig,
                  rng: np.random.Generator | None = None) -> torch.Tensor:
    """Apply one input transformation to a full (H, W, 3) image in [0, 1]."""
    if defense.kind == "jpeg":
        arr = image.detach().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
        buf = io.BytesIO()
        Image.fromarray(arr, mode="RGB").save(buf, format="JPEG",
                                              quality=int(defense.param))
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(decoded)
    if defense.kind == "gaussian_noise":
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(0))
        noise = rng.normal(0.0, defense.param, size=tuple(image.shape)).astype(np.float32)
        return (image + torch.from_numpy(noise)).clamp(0.0, 1.0)
    if defense.kind == "median_blur":
        k = int(defense.param)
        arr = image.detach().numpy()
        filtered = median_filter(arr, size=(k, k, 1), mode="nearest")
        return torch.from_numpy(filtered)
    raise ValueError(f"unknown defense kind {defense.kind!r}")


def _ranked_matches(predictions_per_image: list[list[tuple[float, BoundingBox]]],
                    gt_boxes_per_image: list[list[BoundingBox]],
                    iou_threshold: float,
                    image_size: int) -> tuple[np.ndarray, int]:
    """True-positive flags for predictions ranked by descending score.

    Greedy matching in global score order: each prediction takes the
    unmatched ground-truth box with the highest IoU if that IoU clears
    the threshold.
    """
    flat = []
    for img_idx, preds in enumerate(predictions_per_image):
        for score, box in preds:
            flat.append((float(score), img_idx, box))
    flat.sort(key=lambda t: -t[0])

    matched: list[set[int]] = [set() for _ in gt_boxes_per_image]
    tp_flags = np.zeros(len(flat))
    gt_corners = [[g.to_xyxy(image_size, image_size) for g in boxes]
                  for boxes in gt_boxes_per_image]

    for rank, (score, img_idx, box) in enumerate(flat):
        corners = box.to_xyxy(image_size, image_size)
        best_iou = 0.0
        best_j = -1
        for j, gc in enumerate(gt_corners[img_idx]):
            if j in matched[img_idx]:
                continue
            iou = iou_xyxy(corners, gc)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[img_idx].add(best_j)
            tp_flags[rank] = 1.0
    return tp_flags, int(sum(len(m) for m in matched))


def precision_recall_points(predictions_per_image, gt_boxes_per_image,
                            iou_threshold: float = 0.5,
                            image_size: int = 416) -> tuple[np.ndarray, np.ndarray]:
    """Raw (recall, precision) points of the ranked curve, best score first."""
    tp_flags, _ = _ranked_matches(predictions_per_image, gt_boxes_per_image,
                                  iou_threshold, image_size)
    total_gt = sum(len(g) for g in gt_boxes_per_image)
    if len(tp_flags) == 0 or total_gt == 0:
        return np.zeros(0), np.zeros(0)
    cum_tp = np.cumsum(tp_flags)
    cum_fp = np.cumsum(1.0 - tp_flags)
    return cum_tp / total_gt, cum_tp / (cum_tp + cum_fp)


def average_precision(predictions_per_image: list[list[tuple[float, BoundingBox]]],
                      gt_boxes_per_image: list[list[BoundingBox]],
                      iou_threshold: float = 0.5,
                      image_size: int = 416) -> tuple[float, int]:
    """All-point interpolated AP at one IoU threshold for a single class.

    Predictions are (score, box) pairs per image. Returns (ap in [0, 1],
    number of ground-truth boxes matched).
    """
    tp_flags, n_matched = _ranked_matches(predictions_per_image, gt_boxes_per_image,
                                          iou_threshold, image_size)
    total_gt = sum(len(g) for g in gt_boxes_per_image)
    if total_gt == 0:
        return (1.0 if len(tp_flags) == 0 else 0.0), 0
    if len(tp_flags) == 0:
        return 0.0, 0

    cum_tp = np.cumsum(tp_flags)
    cum_fp = np.cumsum(1.0 - tp_flags)
    precisions = cum_tp / (cum_tp + cum_fp)

    # precision envelope, then sum rectangles over recall increments; the
    # tp counts stay integral and the division happens once, so a perfect
    # ranking lands on ap = 1.0 exactly
    mtp = np.concatenate(([0.0], cum_tp))
    mpre = np.concatenate(([0.0], precisions))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = float(np.sum((mtp[1:] - mtp[:-1]) * mpre[1:]) / total_gt)
    return ap, n_matched


def _transform_for_scene(stack: TransformStack, patch_dims: tuple[int, int],
                         generator: torch.Generator) -> SampledTransform:
    if stack.eot is not None:
        crease_cfg = stack.creases if stack.creases is not None else no_creases()
        return sample_transform(stack.eot, crease_cfg, patch_dims, generator=generator)
    if stack.creases is not None:
        creases = sample_crease_field(stack.creases, patch_dims, generator=generator)
        return SampledTransform(creases=creases)
    return SampledTransform()


def collect_predictions(detector: DetectorHandle, scenes: list[Scene], patch,
                        stack: TransformStack, defense: DefenseConfig | None,
                        render_cfg: RenderConfig, iou_nms: float = 0.45,
                        defense_seed: int = 0):
    """Per-image (score, box) predictions under the full evaluation pipeline."""
    from .images import as_pixels

    generator = torch.Generator()
    generator.manual_seed(stack.seed)
    noise_rng = np.random.Generator(np.random.PCG64(defense_seed))
    predictions = []
    for scene in scenes:
        if patch is not None:
            pixels = as_pixels(patch)
            dims = (pixels.shape[1], pixels.shape[0])
            t = _transform_for_scene(stack, dims, generator)
            with torch.no_grad():
                scene = render(scene, pixels, t, render_cfg)
        image = scene.image
        if defense is not None:
            image = apply_defense(image, defense, rng=noise_rng)
            scene = Scene(image=image, boxes=scene.boxes, source_path=scene.source_path)
        dets = detect(detector, scene, iou_nms=iou_nms)
        predictions.append(
            [(detection_score(d, detector.person_class_index), d.box) for d in dets])
    return predictions


def evaluate_map(detector: DetectorHandle, scenes: list[Scene], patch=None,
                 transform_stack: TransformStack | None = None,
                 defense: DefenseConfig | None = None,
                 ground_truth: GroundTruth | None = None,
                 render_cfg: RenderConfig | None = None,
                 iou_nms: float = 0.45) -> EvalReport:
    """Measure one (detector, patch, transform stack, defense) combination.

    Renders the patch (when given) with a fresh per-scene transform draw,
    applies the defense to the full rendered image, detects, and scores
    average precision at IoU 0.5 against the clean-detection ground
    truth. Recall counts ground-truth boxes recovered by detections at or
    above the handle's confidence threshold.
    """
    stack = transform_stack if transform_stack is not None else TransformStack()
    render_cfg = render_cfg if render_cfg is not None else RenderConfig()
    if ground_truth is None:
        ground_truth = build_ground_truth(detector, scenes)
    if ground_truth.detector_name != detector.name:
        raise ProtocolError(
            f"ground truth was built with detector {ground_truth.detector_name!r}, "
            f"evaluation uses {detector.name!r}; the protocol is self-referential")
    if len(ground_truth.boxes_per_image) != len(scenes):
        raise ProtocolError(
            f"ground truth covers {len(ground_truth.boxes_per_image)} images, "
            f"got {len(scenes)} scenes")

    predictions = collect_predictions(detector, scenes, patch, stack, defense,
                                      render_cfg, iou_nms)
    ap, n_matched = average_precision(predictions, ground_truth.boxes_per_image,
                                      iou_threshold=0.5,
                                      image_size=detector.input_size)
    total_gt = sum(len(g) for g in ground_truth.boxes_per_image)
    recall = 100.0 * n_matched / total_gt if total_gt > 0 else 100.0
    map_50 = 100.0 * ap
    scale_note = render_cfg.scale if patch is not None else None
    return EvalReport(
        detector_name=detector.name,
        map_50=map_50,
        asr=100.0 - map_50,
        recall=recall,
        n_images=len(scenes),
        transform_stack=stack.describe(scale_note) if patch is not None else "clean",
        defense=(defense.kind, defense.param) if defense is not None else None,
        conf_threshold=detector.conf_threshold,
    )


@dataclass
class SweepAxes:
    """Cartesian evaluation grid, mirroring the published table layouts."""

    scales: list[float] | None = None
    creases: list[bool] | None = None  # evaluate with the CT block off/on
    defenses: list[DefenseConfig | None] | None = None
    detectors: list[DetectorHandle] | None = None
    crease_config: CreaseFieldConfig = field(
        default_factory=lambda: CreaseFieldConfig(creases_min=1, creases_max=5))


def sweep(detector: DetectorHandle, scenes: list[Scene], patch,
          axes: SweepAxes, render_cfg: RenderConfig | None = None,
          stack_seed: int = 0) -> list[EvalReport]:
    """Evaluate every cell of the axes grid; one report per cell."""
    base_cfg = render_cfg if render_cfg is not None else RenderConfig()
    scales = axes.scales if axes.scales else [base_cfg.scale]
    crease_axis = axes.creases if axes.creases is not None else [False]
    defenses = axes.defenses if axes.defenses is not None else [None]
    detectors = axes.detectors if axes.detectors is not None else [detector]

    gt_cache: dict[str, GroundTruth] = {}
    reports = []
    for det, scale, use_creases, defense in itertools.product(
            detectors, scales, crease_axis, defenses):
        if det.name not in gt_cache:
            gt_cache[det.name] = build_ground_truth(det, scenes)
        stack = TransformStack(
            creases=axes.crease_config if use_creases else None, seed=stack_seed)
        cfg = replace(base_cfg, scale=scale)
        reports.append(evaluate_map(det, scenes, patch, transform_stack=stack,
                                    defense=defense, ground_truth=gt_cache[det.name],
                                    render_cfg=cfg))
    return reports


def write_reports_csv(reports: list[EvalReport], path) -> None:
    """Persist evaluation reports as one CSV row per cell."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["detector", "transform_stack", "defense", "defense_param",
                         "map_50", "asr", "recall", "n_images", "conf_threshold"])
        for r in reports:
            dk, dp = r.defense if r.defense is not None else ("", "")
            writer.writerow([r.detector_name, r.transform_stack, dk, dp,
                             repr(r.map_50), repr(r.asr), repr(r.recall),
                             r.n_images, r.conf_threshold])


def format_report_table(reports: list[EvalReport]) -> str:
    """Human-readable summary table for terminal output."""
    header = f"{'detector':<12} {'stack':<24} {'defense':<20} {'mAP%':>8} {'ASR%':>8} {'recall%':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        defense = f"{r.defense[0]}({r.defense[1]:g})" if r.defense else "-"
        lines.append(f"{r.detector_name:<12} {r.transform_stack:<24} {defense:<20} "
                     f"{r.map_50:>8.2f} {r.asr:>8.2f} {r.recall:>8.2f}")
    return "\n".join(lines)
