"""The three loss terms of the attack objective and their weighted sum.

The total objective is

    l_total = alpha * l_det + beta * l_sim + gamma * l_tv

with detection, similarity, and smoothness terms. All terms are
differentiable with respect to the patch pixels so the patch can be
optimized by gradient descent while the detector stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .images import ShapeMismatchError, as_pixels

# Smoothing constant inside the TV square root. The raw total-variation
# formula has no gradient where neighboring pixels are equal; the epsilon
# keeps it differentiable everywhere. The sqrt(eps) floor of each term is
# subtracted back out so constant patches score exactly zero at any size.
TV_EPS = 1e-8


@dataclass
class LossWeights:
    """Scale factors for the detection, similarity, and smoothness terms."""

    alpha: float = 1.0
    beta: float = 4.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """Per-term loss values plus the weighted total, as 0-dim tensors."""

    l_det: torch.Tensor
    l_sim: torch.Tensor
    l_tv: torch.Tensor
    l_total: torch.Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return tuple(float(torch.as_tensor(v).detach())
                     for v in (self.l_det, self.l_sim, self.l_tv, self.l_total))


def similarity_loss(patch, guide) -> torch.Tensor:
    """Squared mean absolute difference between patch and guide.

    Returns ((1/n) * sum |P - N|)^2 where n counts scalar elements
    (H * W * 3). Zero iff the images agree elementwise; symmetric in its
    arguments.
    """
    p = as_pixels(patch)
    n = as_pixels(guide)
    if p.shape != n.shape:
        raise ShapeMismatchError(
            f"patch {tuple(p.shape)} and guide {tuple(n.shape)} shapes differ")
    return (p - n).abs().mean() ** 2


def tv_loss(patch) -> torch.Tensor:
    """Smoothed total variation of a patch.

    Sums sqrt(dv^2 + dh^2 + eps) - sqrt(eps) over every pixel that has
    both a lower and a right neighbor, per channel, accumulated over the
    three channels. dv and dh are the vertical and horizontal forward
    differences. A constant patch scores exactly zero.
    """
    p = as_pixels(patch)
    if p.shape[0] < 2 or p.shape[1] < 2:
        raise ValueError(f"patch must be at least 2x2 for tv_loss, got {tuple(p.shape)}")
    dv = p[1:, :-1, :] - p[:-1, :-1, :]
    dh = p[:-1, 1:, :] - p[:-1, :-1, :]
    eps = torch.as_tensor(TV_EPS, dtype=p.dtype, device=p.device)
    terms = torch.sqrt(dv * dv + dh * dh + eps) - torch.sqrt(eps)
    return terms.sum()


def detection_loss(detections_per_image, person_class_index: int = 0) -> torch.Tensor:
    """Mean over images of the mean objectness * person-class probability.

    ``detections_per_image`` holds one list of person-relevant detections
    per adversarial image (selection rule in the detector module). Images
    where nothing was selected contribute 0: the attack already succeeded
    there. The result lies in [0, 1] and keeps gradient state attached to
    the detection probabilities.
    """
    if len(detections_per_image) == 0:
        raise ValueError("detection_loss needs a non-empty batch")
    total = None
    for dets in detections_per_image:
        if len(dets) == 0:
            image_mean = 0.0
        else:
            score_sum = None
            for det in dets:
                obj = torch.as_tensor(det.objectness)
                cls = torch.as_tensor(det.class_probs)[person_class_index]
                term = obj * cls
                score_sum = term if score_sum is None else score_sum + term
            image_mean = score_sum / len(dets)
        total = image_mean if total is None else total + image_mean
    result = total / len(detections_per_image)
    if not isinstance(result, torch.Tensor):
        result = torch.tensor(result)
    return result


def total_loss(patch, guide, detections_per_image, weights: LossWeights,
               person_class_index: int = 0) -> LossBreakdown:
    """Evaluate all three terms and their weighted combination."""
    l_det = detection_loss(detections_per_image, person_class_index)
    l_sim = similarity_loss(patch, guide)
    l_tv = tv_loss(patch)
    l_total = weights.alpha * l_det + weights.beta * l_sim + weights.gamma * l_tv
    return LossBreakdown(l_det=l_det, l_sim=l_sim, l_tv=l_tv, l_total=l_total)
