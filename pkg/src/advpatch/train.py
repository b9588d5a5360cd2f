"""Patch optimization: Adam on raw pixels against a frozen detector.

Each step renders the current patch into a batch of scenes through a
freshly sampled transform (non-rigid creases first, then the rigid and
appearance block), scores the detector's surviving predictions, and
descends the composite objective. The patch itself stays a plain pixel
tensor; transforms are applied to copies, so the gradients always land
on the canonical flat patch.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import torch

from .creases import CreaseFieldConfig
from .detectors import DetectorHandle, forward, select_attack_targets
from .eot import EOTConfig, sample_transform
from .images import PatchImage, as_pixels
from .losses import LossWeights, total_loss
from .render import RenderConfig, render

CHECKPOINT_VERSION = "advpatch-checkpoint-v1"
TRAIN_LOG_HEADER = "epoch,step,l_det,l_sim,l_tv,l_total"

PATCH_INITS = ("random_uniform", "from_guide", "gray")


@dataclass
class AttackConfig:
    """Everything that determines one optimization run.

    The patch inherits its pixel shape from the guide image, so sizing
    the patch means sizing the guide.
    """

    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 5
    batch_size: int = 8
    render: RenderConfig = field(default_factory=RenderConfig)
    eot: EOTConfig = field(default_factory=EOTConfig)
    creases: CreaseFieldConfig = field(default_factory=CreaseFieldConfig)
    patch_init: str = "random_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name, beta in (("adam_beta1", self.adam_beta1),
                           ("adam_beta2", self.adam_beta2)):
            if not (0.0 <= beta < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {beta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_init not in PATCH_INITS:
            raise ValueError(
                f"patch_init must be one of {PATCH_INITS}, got {self.patch_init!r}")


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    l_det: float
    l_sim: float
    l_tv: float
    l_total: float
    wall_time: float = 0.0  # seconds since run start; not part of the CSV

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.step},{self.l_det!r},{self.l_sim!r},"
                f"{self.l_tv!r},{self.l_total!r}")


@dataclass
class CheckpointState:
    """Enough to continue a run bit-for-bit where it stopped."""

    patch: torch.Tensor
    epoch: int  # epochs completed so far
    step: int  # optimizer steps taken so far
    optimizer_state: dict
    rng_state: torch.Tensor
    config: AttackConfig


def write_train_log(records: list[TrainLogRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(TRAIN_LOG_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


def checkpoint(state: CheckpointState, path) -> None:
    """Full-precision snapshot: patch, config, optimizer and RNG state."""
    torch.save({
        "version": CHECKPOINT_VERSION,
        "patch": state.patch.detach().clone(),
        "epoch": state.epoch,
        "step": state.step,
        "optimizer_state": state.optimizer_state,
        "rng_state": state.rng_state,
        "config": dataclasses.asdict(state.config),
    }, path)


def resume(path) -> CheckpointState:
    try:
        blob = torch.load(path, weights_only=False)
        if not isinstance(blob, dict) or "version" not in blob:
            raise ValueError("not a checkpoint file")
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint at {path}: {exc}") from exc
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint at {path} has version {blob['version']!r}, "
            f"expected {CHECKPOINT_VERSION!r}")
    raw = dict(blob["config"])
    raw["weights"] = LossWeights(**raw["weights"])
    raw["render"] = RenderConfig(**raw["render"])
    eot = dict(raw["eot"])
    eot["contrast_range"] = tuple(eot["contrast_range"])
    eot["scale_jitter"] = tuple(eot["scale_jitter"])
    raw["eot"] = EOTConfig(**eot)
    raw["creases"] = CreaseFieldConfig(**raw["creases"])
    return CheckpointState(
        patch=blob["patch"],
        epoch=blob["epoch"],
        step=blob["step"],
        optimizer_state=blob["optimizer_state"],
        rng_state=blob["rng_state"],
        config=AttackConfig(**raw),
    )


def init_patch(cfg: AttackConfig, guide_pixels: torch.Tensor,
               generator: torch.Generator) -> torch.Tensor:
    """Starting pixels per the configured scheme, shaped like the guide.

    Draws from the generator only for random_uniform, so switching
    schemes does not shift the transform stream.
    """
    if cfg.patch_init == "gray":
        return torch.full_like(guide_pixels, 0.5)
    if cfg.patch_init == "from_guide":
        return guide_pixels.clone()
    return torch.rand(guide_pixels.shape, generator=generator)


def optimize_patch(dataset, detector: DetectorHandle, guide,
                   cfg: AttackConfig | None = None,
                   resume_state: CheckpointState | None = None,
                   checkpoint_path=None,
                   progress=None) -> tuple[PatchImage, list[TrainLogRecord]]:
    """Run the attack; returns the final patch and the per-step loss trace.

    A fixed seed makes the whole run reproducible: patch init, scene
    order, and per-scene transform draws all come from one generator
    whose state rides along in checkpoints, so a resumed run continues
    the exact trajectory of an uninterrupted one. Pass ``resume_state``
    (from :func:`resume`) to continue; a config passed alongside it may
    extend ``epochs`` but must agree with the stored patch shape.
    """
    if resume_state is not None:
        if cfg is None:
            cfg = resume_state.config
    elif cfg is None:
        cfg = AttackConfig()
    if len(dataset) == 0:
        raise ValueError("need at least one scene to attack")

    guide_pixels = as_pixels(guide).detach()
    if guide_pixels.ndim != 3 or guide_pixels.shape[2] != 3:
        raise ValueError(f"guide must be (H, W, 3), got {tuple(guide_pixels.shape)}")
    patch_dims = (guide_pixels.shape[1], guide_pixels.shape[0])

    generator = torch.Generator()
    if resume_state is not None:
        if tuple(resume_state.patch.shape) != tuple(guide_pixels.shape):
            raise ValueError(
                f"checkpoint patch is {tuple(resume_state.patch.shape)} but the "
                f"guide is {tuple(guide_pixels.shape)}")
        generator.set_state(resume_state.rng_state)
        patch = resume_state.patch.detach().clone().requires_grad_(True)
    else:
        generator.manual_seed(cfg.seed)
        patch = init_patch(cfg, guide_pixels, generator).requires_grad_(True)

    optimizer = torch.optim.Adam([patch], lr=cfg.lr,
                                 betas=(cfg.adam_beta1, cfg.adam_beta2))
    if resume_state is not None:
        optimizer.load_state_dict(resume_state.optimizer_state)

    start_epoch = resume_state.epoch if resume_state is not None else 0
    step = resume_state.step if resume_state is not None else 0
    records: list[TrainLogRecord] = []
    started = time.monotonic()

    for epoch in range(start_epoch, cfg.epochs):
        order = torch.randperm(len(dataset), generator=generator).tolist()
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            targets_per_image = []
            for scene in batch:
                t = sample_transform(cfg.eot, cfg.creases, patch_dims,
                                     generator=generator)
                rendered = render(scene, patch, t, cfg.render)
                dets = forward(detector, rendered.image)
                targets_per_image.append(select_attack_targets(dets, detector))

            breakdown = total_loss(patch, guide_pixels, targets_per_image,
                                   cfg.weights,
                                   person_class_index=detector.person_class_index)
            values = breakdown.floats()
            for name, value in zip(("l_det", "l_sim", "l_tv", "l_total"), values):
                if value != value or value in (float("inf"), float("-inf")):
                    raise RuntimeError(
                        f"non-finite {name} ({value}) at epoch {epoch} step {step}; "
                        f"aborting before the optimizer can poison the patch")

            optimizer.zero_grad()
            breakdown.l_total.backward()
            optimizer.step()
            with torch.no_grad():
                patch.clamp_(0.0, 1.0)

            step += 1
            record = TrainLogRecord(epoch, step, *values,
                                    wall_time=time.monotonic() - started)
            records.append(record)
            if progress is not None:
                progress(record)

    if checkpoint_path is not None:
        checkpoint(CheckpointState(
            patch=patch.detach().clone(),
            epoch=cfg.epochs,
            step=step,
            optimizer_state=optimizer.state_dict(),
            rng_state=generator.get_state(),
            config=cfg,
        ), checkpoint_path)
    return PatchImage(pixels=patch.detach().clone()), records
