"""Command-line surface: attack, eval, sweep, render-preview, export-patch.

Runs are driven by a YAML config plus flag overrides (flags win over the
file, the file wins over defaults). Every run echoes its effective
config and a manifest into the output directory so it can be reproduced
from the artifacts alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from .creases import CreaseFieldConfig, no_creases
from .dataset import DatasetError, DatasetIndex, SceneView, ingest_dataset
from .detectors import DetectorHandle, DetectorLoadError, load_toy_detector
from .eot import EOTConfig, eot_off, sample_transform
from .evaluate import (DefenseConfig, EvalReport, SweepAxes, TransformStack,
                       build_ground_truth, collect_predictions, evaluate_map,
                       format_report_table, precision_recall_points, sweep,
                       write_reports_csv)
from .images import GuideImage, load_pixels
from .losses import LossWeights
from .render import RenderConfig, render_detailed, write_render_preview
from .train import AttackConfig, optimize_patch, resume, write_train_log
from .warp import resize_image

EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_DETECTOR = 4
EXIT_RUNTIME = 5

PRINT_WIDTH_CM = 20.5
PRINT_HEIGHT_CM = 21.5


class UsageError(ValueError):
    """Bad flags or config contents; exits with the usage code."""


@dataclass
class DetectorSpec:
    name: str = "toy"
    weights: str | None = None
    cfg: str | None = None
    classes: str | None = None
    person_class_index: int = 0
    conf_threshold: float = 0.5


@dataclass
class DatasetSpec:
    images: str = ""
    labels: str = ""
    split: str = ""


@dataclass
class RunConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    guide_image: str = ""
    patch_size: int = 64
    output_dir: str = "runs/out"


def _build_section(cls, raw: dict, where: str, nested: dict | None = None):
    """Construct a config dataclass, rejecting unknown keys by name."""
    nested = nested or {}
    known = {f.name for f in cls.__dataclass_fields__.values()} \
        if hasattr(cls, "__dataclass_fields__") else set()
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {where}.{key}")
        if key in nested and isinstance(value, dict):
            sub_cls, sub_nested = nested[key]
            value = _build_section(sub_cls, value, f"{where}.{key}", sub_nested)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config section {where}: {exc}") from exc


ATTACK_NESTED = {
    "weights": (LossWeights, None),
    "render": (RenderConfig, None),
    "eot": (EOTConfig, None),
    "creases": (CreaseFieldConfig, None),
}


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse the YAML run config, apply flag overrides, validate paths."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping at top level")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"config key {key} collides with a scalar")
        node[parts[-1]] = value

    cfg = _build_section(RunConfig, raw, "config", nested={
        "attack": (AttackConfig, ATTACK_NESTED),
        "detector": (DetectorSpec, None),
        "dataset": (DatasetSpec, None),
    })

    if cfg.guide_image and not Path(cfg.guide_image).is_file():
        raise UsageError(f"guide_image not found: {cfg.guide_image}")
    for label, value in (("dataset.images", cfg.dataset.images),
                         ("dataset.labels", cfg.dataset.labels)):
        if value and not Path(value).is_dir():
            raise UsageError(f"{label} directory not found: {value}")
    for label, value in (("detector.weights", cfg.detector.weights),
                         ("detector.cfg", cfg.detector.cfg),
                         ("detector.classes", cfg.detector.classes)):
        if value and not Path(value).is_file():
            raise UsageError(f"{label} file not found: {value}")
    return cfg


def _config_dict(cfg: RunConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(cfg)


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_detector(spec: DetectorSpec) -> DetectorHandle:
    if spec.name == "toy":
        return load_toy_detector(path=spec.weights,
                                 conf_threshold=spec.conf_threshold)
    if spec.cfg and spec.weights:
        from .darknet import load_darknet_detector
        person = spec.person_class_index
        if spec.classes:
            names = Path(spec.classes).read_text().splitlines()
            if "person" in names:
                person = names.index("person")
        return load_darknet_detector(spec.cfg, spec.weights,
                                     person_class_index=person,
                                     conf_threshold=spec.conf_threshold,
                                     name=spec.name)
    raise UsageError(
        f"detector {spec.name!r} needs either name 'toy' or both cfg and weights paths")


def load_guide(cfg: RunConfig) -> GuideImage:
    if not cfg.guide_image:
        raise UsageError("config needs guide_image for this command")
    pixels = load_pixels(cfg.guide_image)
    if pixels.shape[:2] != (cfg.patch_size, cfg.patch_size):
        pixels = resize_image(pixels, cfg.patch_size, cfg.patch_size).clamp(0, 1)
    return GuideImage(pixels=pixels)


def load_scenes(cfg: RunConfig, input_size: int) -> DatasetIndex:
    """Ingest the configured dataset in the detector's letterbox frame."""
    if not cfg.dataset.images or not cfg.dataset.labels:
        raise UsageError("config needs dataset.images and dataset.labels")
    return ingest_dataset(cfg.dataset.images, cfg.dataset.labels, size=input_size)


def load_patch_pixels(path) -> torch.Tensor:
    """A patch from either a PNG or a full-precision checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"patch not found: {path}")
    if path.suffix == ".ckpt":
        return resume(path).patch
    return load_pixels(path)


def write_run_artifacts(cfg: RunConfig, out_dir: Path, detector: DetectorHandle,
                        command: str) -> None:
    config_dict = _config_dict(cfg)
    effective = yaml.safe_dump(config_dict, sort_keys=True)
    (out_dir / "effective_config.yaml").write_text(effective)
    if cfg.detector.weights:
        weights_hash = _sha256_file(cfg.detector.weights)
    else:
        weights_hash = f"builtin:{detector.name}"
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(effective.encode()).hexdigest(),
        "seed": cfg.attack.seed,
        "detector": detector.name,
        "detector_weights_sha256": weights_hash,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _stack_from_flags(cfg: RunConfig, args) -> TransformStack:
    creases = cfg.attack.creases if getattr(args, "creases", False) else None
    eot = cfg.attack.eot if getattr(args, "eot", False) else None
    return TransformStack(creases=creases, eot=eot,
                          seed=getattr(args, "stack_seed", 0))


def _parse_defense(text: str) -> DefenseConfig:
    if ":" not in text:
        raise UsageError(f"defense must be kind:param, got {text!r}")
    kind, param = text.split(":", 1)
    try:
        return DefenseConfig(kind=kind.strip(), param=float(param))
    except ValueError as exc:
        raise UsageError(f"bad defense {text!r}: {exc}") from exc


def cmd_attack(args) -> int:
    cfg = load_run_config(args.config, _attack_overrides(args))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    detector = load_detector(cfg.detector)
    index = load_scenes(cfg, detector.input_size)
    if len(index) == 0:
        raise DatasetError("dataset is empty")
    guide = load_guide(cfg)
    write_run_artifacts(cfg, out_dir, detector, "attack")

    every = max(1, args.print_every)

    def progress(rec):
        if rec.step % every == 0:
            print(f"epoch {rec.epoch:4d} step {rec.step:6d} "
                  f"l_det {rec.l_det:.4f} l_sim {rec.l_sim:.4f} "
                  f"l_tv {rec.l_tv:.4f} l_total {rec.l_total:.4f}")

    patch, records = optimize_patch(SceneView(index), detector, guide,
                                    cfg=cfg.attack,
                                    checkpoint_path=out_dir / "patch.ckpt",
                                    progress=progress)
    patch.save_png(out_dir / "patch.png")
    write_train_log(records, out_dir / "loss_log.csv")
    print(f"wrote {out_dir / 'patch.png'} after {len(records)} steps")
    return 0


def _attack_overrides(args) -> dict:
    return {
        "attack.seed": args.seed,
        "attack.epochs": args.epochs,
        "attack.batch_size": args.batch_size,
        "attack.lr": args.lr,
        "attack.patch_init": args.patch_init,
        "attack.render.scale": args.scale,
        "patch_size": args.patch_size,
        "output_dir": args.output,
    }


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {"output_dir": args.output})
    out_dir = Path(cfg.output_dir)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    detector = load_detector(cfg.detector)
    scenes = load_scenes(cfg, detector.input_size).load_all()
    if not scenes:
        raise DatasetError("dataset is empty")
    patch = load_patch_pixels(args.patch) if args.patch else None
    stack = _stack_from_flags(cfg, args)
    defense = _parse_defense(args.defense) if args.defense else None
    render_cfg = cfg.attack.render
    if args.scale is not None:
        render_cfg = RenderConfig(scale=args.scale,
                                  vertical_offset=render_cfg.vertical_offset)

    gt = build_ground_truth(detector, scenes)
    report = evaluate_map(detector, scenes, patch, transform_stack=stack,
                          defense=defense, ground_truth=gt, render_cfg=render_cfg)
    print(format_report_table([report]))
    write_reports_csv([report], out_dir / "reports" / "eval.csv")

    if args.plot:
        predictions = collect_predictions(detector, scenes, patch, stack,
                                          defense, render_cfg)
        recalls, precisions = precision_recall_points(
            predictions, gt.boxes_per_image, image_size=detector.input_size)
        _plot_pr(recalls, precisions, report,
                 out_dir / "reports" / "pr_curve.png")
        print(f"wrote {out_dir / 'reports' / 'pr_curve.png'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, {"output_dir": args.output})
    out_dir = Path(cfg.output_dir)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    detector = load_detector(cfg.detector)
    scenes = load_scenes(cfg, detector.input_size).load_all()
    if not scenes:
        raise DatasetError("dataset is empty")
    patch = load_patch_pixels(args.patch)

    scales = [float(v) for v in args.scales.split(",")] if args.scales else None
    if args.creases == "both":
        crease_axis: list[bool] | None = [False, True]
    elif args.creases == "on":
        crease_axis = [True]
    elif args.creases == "off":
        crease_axis = [False]
    else:
        crease_axis = None
    defenses = None
    if args.defenses:
        defenses = [None] + [_parse_defense(v) for v in args.defenses.split(",")]

    axes = SweepAxes(scales=scales, creases=crease_axis, defenses=defenses,
                     crease_config=cfg.attack.creases)
    reports = sweep(detector, scenes, patch, axes, render_cfg=cfg.attack.render)
    print(format_report_table(reports))
    write_reports_csv(reports, out_dir / "reports" / "sweep.csv")
    print(f"wrote {out_dir / 'reports' / 'sweep.csv'}")
    if args.plot and scales:
        _plot_sweep(reports, out_dir / "reports" / "sweep.png")
        print(f"wrote {out_dir / 'reports' / 'sweep.png'}")
    return 0


def cmd_render_preview(args) -> int:
    cfg = load_run_config(args.config, {"output_dir": args.output})
    out_dir = Path(cfg.output_dir) / "previews"
    out_dir.mkdir(parents=True, exist_ok=True)
    # previews must use the same letterbox frame the attack would see
    detector = load_detector(cfg.detector)
    index = load_scenes(cfg, detector.input_size)
    if len(index) == 0:
        raise DatasetError("dataset is empty")
    patch = load_patch_pixels(args.patch)
    generator = torch.Generator()
    generator.manual_seed(cfg.attack.seed)
    dims = (patch.shape[1], patch.shape[0])
    eot = cfg.attack.eot if args.eot else eot_off()
    creases = cfg.attack.creases if args.creases else no_creases()

    count = min(args.count, len(index))
    for i in range(count):
        scene = index.load_scene(i)
        t = sample_transform(eot, creases, dims, generator=generator)
        rendered, rects, skipped = render_detailed(scene, patch, t,
                                                   cfg.attack.render)
        path = out_dir / f"preview_{i:03d}.png"
        write_render_preview(rendered, rects, path)
        note = f" ({skipped} box(es) too small)" if skipped else ""
        print(f"wrote {path}{note}")
    return 0


def cmd_export_patch(args) -> int:
    pixels = load_patch_pixels(args.patch)
    dpi = args.dpi
    if dpi < 1:
        raise UsageError(f"dpi must be >= 1, got {dpi}")
    px_w = round(args.width_cm / 2.54 * dpi)
    px_h = round(args.height_cm / 2.54 * dpi)
    if px_w < 1 or px_h < 1:
        raise UsageError(f"print size {args.width_cm}x{args.height_cm} cm at "
                         f"{dpi} dpi collapses to zero pixels")
    out = resize_image(pixels, px_h, px_w).clamp(0.0, 1.0)

    from PIL import Image
    import numpy as np
    arr = (out.numpy() * 255.0).round().astype("uint8")
    Image.fromarray(arr, mode="RGB").save(args.out, dpi=(dpi, dpi))
    print(f"wrote {args.out}: {px_w}x{px_h} px "
          f"({args.width_cm}x{args.height_cm} cm at {dpi} dpi)")
    return 0


def _plot_pr(recalls, precisions, report: EvalReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recalls, precisions, drawstyle="steps-post")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.detector_name}: mAP {report.map_50:.2f}%")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_sweep(reports: list[EvalReport], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import re

    series: dict[str, list[tuple[float, float]]] = {}
    for r in reports:
        m = re.search(r"scale=([0-9.]+)", r.transform_stack)
        if not m:
            continue
        scale = float(m.group(1))
        label = re.sub(r"scale=[0-9.]+\+?", "", r.transform_stack) or "plain"
        if r.defense:
            label += f" + {r.defense[0]}({r.defense[1]:g})"
        series.setdefault(label, []).append((scale, r.map_50))

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, points in sorted(series.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", label=label)
    ax.set_xlabel("patch scale")
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advpatch",
        description="Optimize and evaluate naturalistic adversarial patches "
                    "against person detectors.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="optimize a patch from a run config")
    p_attack.add_argument("--config", required=True)
    p_attack.add_argument("--seed", type=int, default=None)
    p_attack.add_argument("--epochs", type=int, default=None)
    p_attack.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p_attack.add_argument("--lr", type=float, default=None)
    p_attack.add_argument("--patch-init", default=None, dest="patch_init",
                          choices=("random_uniform", "from_guide", "gray"))
    p_attack.add_argument("--patch-size", type=int, default=None, dest="patch_size")
    p_attack.add_argument("--scale", type=float, default=None)
    p_attack.add_argument("--output", default=None)
    p_attack.add_argument("--print-every", type=int, default=20, dest="print_every")
    p_attack.set_defaults(func=cmd_attack)

    p_eval = sub.add_parser("eval", help="measure mAP/ASR/recall for one setup")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--patch", default=None,
                        help="patch PNG or .ckpt; omit for the clean baseline")
    p_eval.add_argument("--creases", action="store_true",
                        help="draw a crease field per scene")
    p_eval.add_argument("--eot", action="store_true",
                        help="draw the full rigid/appearance transform per scene")
    p_eval.add_argument("--defense", default=None, help="kind:param, e.g. jpeg:70")
    p_eval.add_argument("--scale", type=float, default=None)
    p_eval.add_argument("--stack-seed", type=int, default=0, dest="stack_seed")
    p_eval.add_argument("--output", default=None)
    p_eval.add_argument("--plot", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="Cartesian evaluation grid to CSV")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--patch", required=True)
    p_sweep.add_argument("--scales", default=None, help="comma list, e.g. 0.3,0.4")
    p_sweep.add_argument("--creases", default=None,
                         choices=("on", "off", "both"))
    p_sweep.add_argument("--defenses", default=None,
                         help="comma list of kind:param cells (none is implied)")
    p_sweep.add_argument("--output", default=None)
    p_sweep.add_argument("--plot", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_prev = sub.add_parser("render-preview",
                            help="write patched sample images for visual audit")
    p_prev.add_argument("--config", required=True)
    p_prev.add_argument("--patch", required=True)
    p_prev.add_argument("--count", type=int, default=4)
    p_prev.add_argument("--eot", action="store_true")
    p_prev.add_argument("--creases", action="store_true")
    p_prev.add_argument("--output", default=None)
    p_prev.set_defaults(func=cmd_render_preview)

    p_exp = sub.add_parser("export-patch", help="print-ready PNG at physical size")
    p_exp.add_argument("--patch", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--dpi", type=int, default=300)
    p_exp.add_argument("--width-cm", type=float, default=PRINT_WIDTH_CM,
                       dest="width_cm")
    p_exp.add_argument("--height-cm", type=float, default=PRINT_HEIGHT_CM,
                       dest="height_cm")
    p_exp.set_defaults(func=cmd_export_patch)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except DetectorLoadError as exc:
        print(f"detector error: {exc}", file=sys.stderr)
        return EXIT_DETECTOR
    except (RuntimeError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
