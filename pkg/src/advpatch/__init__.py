"""Naturalistic adversarial patches against person detectors.

Optimizes a printable patch by gradient descent on a composite objective
(detection suppression, similarity to a benign guide image, smoothness),
hardened with sampled rigid/appearance transforms and a non-rigid crease
warp, and measures attacks with a clean-detections-as-ground-truth mAP
protocol.
"""

from .boxes import DETECTOR_INPUT_SIZE, BoundingBox, Scene, box_iou, iou_xyxy
from .creases import (Crease, CreaseFieldConfig, apply_creases,
                      crease_displacement_field, crease_multiplier, no_creases,
                      sample_crease_field)
from .detectors import (Detection, DetectorHandle, DetectorLoadError, detect,
                        forward, load_toy_detector, nms, select_attack_targets)
from .eot import (EOTConfig, IDENTITY_TRANSFORM, SampledTransform,
                  apply_transform, eot_off, sample_transform)
from .evaluate import (DefenseConfig, EvalReport, GroundTruth, SweepAxes,
                       TransformStack, apply_defense, average_precision,
                       build_ground_truth, evaluate_map, sweep)
from .images import GuideImage, PatchImage, ShapeMismatchError, as_pixels
from .losses import (LossBreakdown, LossWeights, detection_loss,
                     similarity_loss, total_loss, tv_loss)
from .render import RenderConfig, render, render_detailed
from .train import (AttackConfig, CheckpointState, TrainLogRecord, checkpoint,
                    optimize_patch, resume)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "BoundingBox", "CheckpointState", "Crease",
    "CreaseFieldConfig", "DefenseConfig", "Detection", "DetectorHandle",
    "DetectorLoadError", "DETECTOR_INPUT_SIZE", "EOTConfig", "EvalReport",
    "GroundTruth", "GuideImage", "IDENTITY_TRANSFORM", "LossBreakdown",
    "LossWeights", "PatchImage", "RenderConfig", "SampledTransform", "Scene",
    "ShapeMismatchError", "SweepAxes", "TrainLogRecord", "TransformStack",
    "apply_creases", "apply_defense", "apply_transform", "as_pixels",
    "average_precision", "box_iou", "build_ground_truth", "checkpoint",
    "crease_displacement_field", "crease_multiplier", "detect",
    "detection_loss", "eot_off", "evaluate_map", "forward", "iou_xyxy",
    "load_toy_detector", "nms", "no_creases", "optimize_patch", "render",
    "render_detailed", "resume", "sample_crease_field", "sample_transform",
    "select_attack_targets", "similarity_loss", "sweep", "total_loss",
    "tv_loss",
]
