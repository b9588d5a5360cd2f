"""Uniform detector interface: raw differentiable forward, attack-target
selection, and NMS-postprocessed inference for evaluation.

Any victim network plugs in by exposing ``predict_grid(images) ->
(boxes, objectness, class_probs)`` with a fixed prediction count per
image. Two backends live in this package: the small fully-convolutional
person detector below (weights ship in ``assets/`` so CI needs no
downloads) and the Darknet adapter for external pretrained YOLO weights.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

import torch
from torch import nn

from .boxes import BoundingBox, Scene, iou_xyxy

TOY_WEIGHTS_VERSION = "toy-detector-v1"


class DetectorLoadError(RuntimeError):
    """Raised when a weights file is missing or cannot be parsed."""


@dataclass
class Detection:
    """One raw detector output with gradient state intact."""

    box: BoundingBox
    objectness: torch.Tensor  # 0-dim, in [0, 1]
    class_probs: torch.Tensor  # (num_classes,), each in [0, 1]


@dataclass
class DetectorHandle:
    """A loaded, frozen detector plus the attack-relevant metadata."""

    name: str
    module: nn.Module
    person_class_index: int = 0
    conf_threshold: float = 0.5
    input_size: int = 416

    def __post_init__(self):
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)


class TinyPersonNet(nn.Module):
    """Small single-class FCN detector (stride 32, one anchor per cell).

    The head emits (tx, ty, tw, th, obj, cls) per cell; boxes decode the
    usual one-stage way: sigmoid cell offsets for the center and an
    exponential anchor scaling for the extent. SiLU activations keep the
    whole pipeline smooth for finite-difference gradient checks.
    """

    ANCHOR = (0.2, 0.4)  # normalized anchor (w, h), roughly a person box
    STRIDE = 32

    def __init__(self):
        super().__init__()

        # plain convs, no normalization: train and eval modes behave
        # identically, so hard negatives learned in training (flat images,
        # empty scenes) carry over to inference
        def block(cin, cout, k, s):
            return nn.Sequential(
                nn.Conv2d(cin, cout, k, stride=s, padding=k // 2),
                nn.SiLU(),
            )

        self.body = nn.Sequential(
            block(3, 16, 7, 4),
            block(16, 32, 3, 2),
            block(32, 48, 3, 2),
            block(48, 64, 3, 2),
            block(64, 64, 3, 1),
        )
        self.head = nn.Conv2d(64, 6, 1)
        # bias the objectness logit toward background so early training
        # does not flood every cell with detections
        with torch.no_grad():
            self.head.bias[4] = -4.0

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(images))

    def predict_grid(self, images: torch.Tensor):
        """Decode raw maps to (boxes, objectness, class_probs).

        boxes: (N, M, 4) normalized center format; objectness: (N, M);
        class_probs: (N, M, 1). M is the grid cell count, fixed by the
        input size. Fully differentiable with respect to ``images``.
        """
        raw = self.forward(images)
        n, _, gh, gw = raw.shape
        raw = raw.permute(0, 2, 3, 1)  # (N, gh, gw, 6)

        gy, gx = torch.meshgrid(
            torch.arange(gh, dtype=raw.dtype, device=raw.device),
            torch.arange(gw, dtype=raw.dtype, device=raw.device),
            indexing="ij",
        )
        cx = (gx + torch.sigmoid(raw[..., 0])) / gw
        cy = (gy + torch.sigmoid(raw[..., 1])) / gh
        anchor_w, anchor_h = self.ANCHOR
        w = anchor_w * torch.exp(raw[..., 2].clamp(-6.0, 4.0))
        h = anchor_h * torch.exp(raw[..., 3].clamp(-6.0, 4.0))
        obj = torch.sigmoid(raw[..., 4])
        cls = torch.sigmoid(raw[..., 5:6])

        boxes = torch.stack([cx, cy, w, h], dim=-1).reshape(n, gh * gw, 4)
        return boxes, obj.reshape(n, gh * gw), cls.reshape(n, gh * gw, 1)


def _default_toy_weights_path() -> str:
    return str(resources.files("advpatch").joinpath("assets/toy_detector.pt"))


def load_toy_detector(path: str | os.PathLike | None = None,
                      conf_threshold: float = 0.5,
                      input_size: int = 416) -> DetectorHandle:
    """Load the packaged toy detector (or one trained to another path)."""
    path = str(path) if path is not None else _default_toy_weights_path()
    if not os.path.exists(path):
        raise DetectorLoadError(f"toy detector weights not found at {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("version") != TOY_WEIGHTS_VERSION:
            raise DetectorLoadError(
                f"weights at {path} have version {blob.get('version')!r}, "
                f"expected {TOY_WEIGHTS_VERSION!r}")
        net = TinyPersonNet()
        net.load_state_dict(blob["state_dict"])
    except DetectorLoadError:
        raise
    except Exception as exc:
        raise DetectorLoadError(f"cannot load toy detector weights from {path}: {exc}")
    return DetectorHandle(name="toy", module=net, person_class_index=0,
                          conf_threshold=conf_threshold, input_size=input_size)


def _image_tensor(image) -> torch.Tensor:
    if isinstance(image, Scene):
        return image.image
    return image


def forward(detector: DetectorHandle, image) -> list[Detection]:
    """Run the detector and return every raw prediction, no NMS.

    The prediction count is fixed by the architecture and input size.
    Objectness and class probabilities keep gradient state so the attack
    loss can backpropagate through them to the image pixels.
    """
    pixels = _image_tensor(image)
    if pixels.shape[0] != detector.input_size or pixels.shape[1] != detector.input_size:
        raise ValueError(
            f"image is {tuple(pixels.shape[:2])}, detector {detector.name} "
            f"expects {detector.input_size}x{detector.input_size}")
    batch = pixels.permute(2, 0, 1).unsqueeze(0)
    if not batch.dtype.is_floating_point:
        batch = batch.float()
    param = next(detector.module.parameters(), None)
    if param is not None and batch.dtype != param.dtype:
        batch = batch.to(param.dtype)
    boxes, obj, cls = detector.module.predict_grid(batch)

    detections = []
    boxes0 = boxes[0]
    obj0 = obj[0]
    cls0 = cls[0]
    boxes_list = boxes0.detach().tolist()
    for j in range(boxes0.shape[0]):
        bx = boxes_list[j]
        detections.append(Detection(
            box=BoundingBox(cx=bx[0], cy=bx[1], w=max(bx[2], 1e-9), h=max(bx[3], 1e-9),
                            class_id=detector.person_class_index),
            objectness=obj0[j],
            class_probs=cls0[j],
        ))
    return detections


def select_attack_targets(detections: list[Detection],
                          handle: DetectorHandle) -> list[Detection]:
    """Detections feeding the attack loss: objectness above threshold, or
    the single highest-objectness one if nothing clears it.

    The fallback keeps the loss from silently saturating at zero while
    the attack is still in progress. Empty input stays empty.
    """
    if len(detections) == 0:
        return []
    above = [d for d in detections
             if float(d.objectness.detach()) > handle.conf_threshold]
    if above:
        return above
    return [max(detections, key=lambda d: float(d.objectness.detach()))]


def detection_score(det: Detection, person_class_index: int) -> float:
    """Ranking confidence for evaluation: objectness * person probability."""
    return float(det.objectness) * float(det.class_probs[person_class_index])


def nms(detections: list[Detection], scores: list[float], iou_threshold: float,
        input_size: int) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first."""
    order = sorted(range(len(detections)), key=lambda i: scores[i], reverse=True)
    kept: list[int] = []
    corners = [d.box.to_xyxy(input_size, input_size) for d in detections]
    for i in order:
        if all(iou_xyxy(corners[i], corners[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept


def detect(detector: DetectorHandle, image, iou_nms: float = 0.45) -> list[Detection]:
    """Post-processed person detections for evaluation (never the attack).

    Confidence-filters at the handle threshold on objectness * person
    probability, then applies greedy NMS at ``iou_nms``. Runs without
    gradient tracking.
    """
    if not (0.0 < iou_nms < 1.0):
        raise ValueError(f"iou_nms must be in (0, 1), got {iou_nms}")
    with torch.no_grad():
        raw = forward(detector, image)
    scored = [(detection_score(d, detector.person_class_index), d) for d in raw]
    candidates = [(s, d) for s, d in scored if s > detector.conf_threshold]
    if not candidates:
        return []
    scores = [s for s, _ in candidates]
    dets = [d for _, d in candidates]
    kept = nms(dets, scores, iou_nms, detector.input_size)
    return [dets[i] for i in kept]


def format_detection_line(image_id: str, det: Detection, person_class_index: int,
                          input_size: int) -> str:
    """One text line per detection: image_id class score x_min y_min x_max y_max."""
    x0, y0, x1, y1 = det.box.to_xyxy(input_size, input_size)
    score = detection_score(det, person_class_index)
    return f"{image_id} {det.box.class_id} {score:.6f} {x0:.2f} {y0:.2f} {x1:.2f} {y1:.2f}"


def dump_detections(path: str | os.PathLike, per_image: dict[str, list[Detection]],
                    person_class_index: int, input_size: int) -> None:
    """Write detections for a whole evaluation run in the text line format."""
    with open(path, "w") as fh:
        for image_id, dets in per_image.items():
            for det in dets:
                fh.write(format_detection_line(image_id, det, person_class_index,
                                               input_size) + "\n")
