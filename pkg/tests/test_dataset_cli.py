import csv
import json

import numpy as np
import pytest
import torch
import yaml

from advpatch import cli
from advpatch.boxes import BoundingBox
from advpatch.dataset import (DatasetError, LabelParseError, SceneView,
                              ingest_dataset, letterbox_box, letterbox_image,
                              letterbox_params, parse_label_file)
from advpatch.images import load_pixels, save_pixels
from advpatch.toydata import make_guide_image, make_toy_scenes


def _write_png(path, h=8, w=8, value=None, seed=0):
    if value is None:
        gen = torch.Generator().manual_seed(seed)
        pixels = torch.rand(h, w, 3, generator=gen)
    else:
        pixels = torch.full((h, w, 3), float(value))
    save_pixels(pixels, path)


# ---- letterboxing ------------------------------------------------------------

def test_letterbox_params_wide_image():
    # 200x100 into 416: width-limited, scale 2.08, vertical padding only
    scale, pad_left, pad_top = letterbox_params(200, 100, 416)
    assert scale == 416 / 200
    assert pad_left == 0
    assert pad_top == (416 - round(100 * scale)) // 2


def test_letterbox_params_square_is_identity_fit():
    scale, pad_left, pad_top = letterbox_params(416, 416, 416)
    assert scale == 1.0
    assert pad_left == 0 and pad_top == 0


def test_letterbox_params_degenerate_rejected():
    with pytest.raises(DatasetError):
        letterbox_params(0, 100, 416)
    with pytest.raises(DatasetError):
        letterbox_params(100, -3, 416)


def test_letterbox_box_matches_corner_mapping_oracle():
    # map box corners through the pixel affine by hand, then renormalize
    rng = np.random.Generator(np.random.PCG64(77))
    for _ in range(20):
        orig_w = int(rng.integers(5, 900))
        orig_h = int(rng.integers(5, 900))
        size = int(rng.choice([64, 416, 608]))
        cx, cy = (float(v) for v in rng.uniform(0.25, 0.75, size=2))
        bw, bh = (float(v) for v in rng.uniform(0.05, 0.3, size=2))
        out = letterbox_box(BoundingBox(cx=cx, cy=cy, w=bw, h=bh, class_id=2),
                            orig_w, orig_h, size)

        scale = size / max(orig_w, orig_h)
        pad_left = (size - max(1, round(orig_w * scale))) // 2
        pad_top = (size - max(1, round(orig_h * scale))) // 2
        x0 = (cx - bw / 2) * orig_w * scale + pad_left
        x1 = (cx + bw / 2) * orig_w * scale + pad_left
        y0 = (cy - bh / 2) * orig_h * scale + pad_top
        y1 = (cy + bh / 2) * orig_h * scale + pad_top
        assert abs(out.cx - (x0 + x1) / 2 / size) < 1e-9
        assert abs(out.cy - (y0 + y1) / 2 / size) < 1e-9
        assert abs(out.w - (x1 - x0) / size) < 1e-9
        assert abs(out.h - (y1 - y0) / size) < 1e-9
        assert out.class_id == 2


def test_letterbox_image_centers_content_in_gray():
    out = letterbox_image(torch.ones(10, 20, 3), size=64)
    # scale 3.2: content spans all 64 columns and rows 16..48
    assert out.shape == (64, 64, 3)
    assert torch.all(out[:16] == 0.5)
    assert torch.all(out[48:] == 0.5)
    assert torch.all(out[16:48] == 1.0)


def test_letterbox_image_square_equals_plain_resize():
    from advpatch.warp import resize_image
    gen = torch.Generator().manual_seed(4)
    pixels = torch.rand(8, 8, 3, generator=gen)
    assert torch.equal(letterbox_image(pixels, size=16),
                       resize_image(pixels, 16, 16))


# ---- label parsing -----------------------------------------------------------

def test_parse_label_file_reads_boxes_and_skips_blanks(tmp_path):
    path = tmp_path / "a.txt"
    path.write_text("0 0.5 0.5 0.2 0.4\n\n1 0.25 0.75 0.1 0.1\n")
    boxes = parse_label_file(path)
    assert len(boxes) == 2
    assert boxes[0] == BoundingBox(cx=0.5, cy=0.5, w=0.2, h=0.4, class_id=0)
    assert boxes[1].class_id == 1


@pytest.mark.parametrize("line", [
    "0 0.5 0.5 0.2",            # wrong field count
    "0 0.5 oops 0.2 0.4",       # non-numeric
    "0 1.5 0.5 0.2 0.4",        # out of range
    "0 0.5 0.5 0.0 0.4",        # zero extent
])
def test_parse_label_file_errors_carry_file_and_line(tmp_path, line):
    path = tmp_path / "bad.txt"
    path.write_text("0 0.5 0.5 0.2 0.4\n" + line + "\n")
    with pytest.raises(LabelParseError) as err:
        parse_label_file(path)
    assert f"{path}:2" in str(err.value)


# ---- ingestion ---------------------------------------------------------------

def _dataset_dirs(tmp_path):
    images = tmp_path / "images"
    labels = tmp_path / "labels"
    images.mkdir()
    labels.mkdir()
    return images, labels


def test_ingest_empty_directories(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    index = ingest_dataset(images, labels)
    assert len(index) == 0
    assert index.skipped == []


def test_ingest_missing_images_dir(tmp_path):
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path / "nope", tmp_path)


def test_ingest_single_square_image(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png", h=64, w=64)
    (labels / "a.txt").write_text("0 0.5 0.5 0.2 0.4\n")
    index = ingest_dataset(images, labels, size=416)
    assert len(index) == 1
    box = index.entries[0].boxes[0]
    # square source: normalized coordinates survive the letterbox unchanged
    assert box.cx == pytest.approx(0.5, abs=1e-9)
    assert box.w == pytest.approx(0.2, abs=1e-9)
    assert box.h == pytest.approx(0.4, abs=1e-9)
    scene = index.load_scene(0)
    assert scene.image.shape == (416, 416, 3)
    assert scene.boxes == index.entries[0].boxes


def test_ingest_image_without_label_gets_zero_boxes(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "lonely.png")
    index = ingest_dataset(images, labels)
    assert index.entries[0].boxes == []
    assert index.entries[0].label_path is None


def test_ingest_ignores_non_image_files(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png")
    (images / "notes.txt").write_text("not an image")
    index = ingest_dataset(images, labels)
    assert len(index) == 1


def test_ingest_tolerates_few_unreadable_images(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    for i in range(11):
        _write_png(images / f"ok_{i:02d}.png", seed=i)
    (images / "junk.png").write_bytes(b"not a png at all")
    index = ingest_dataset(images, labels)
    assert len(index) == 11
    assert index.skipped == ["junk.png"]


def test_ingest_aborts_when_too_many_unreadable(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png")
    _write_png(images / "b.png", seed=1)
    (images / "junk.png").write_bytes(b"nope")
    with pytest.raises(DatasetError) as err:
        ingest_dataset(images, labels)
    assert "unreadable" in str(err.value)


def test_ingest_bad_label_aborts_with_location(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png")
    (labels / "a.txt").write_text("0 0.5 0.5\n")
    with pytest.raises(LabelParseError) as err:
        ingest_dataset(images, labels)
    assert "a.txt:1" in str(err.value)


def test_load_scene_rejects_image_changed_since_ingest(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png", h=8, w=8)
    index = ingest_dataset(images, labels)
    _write_png(images / "a.png", h=12, w=12)
    with pytest.raises(DatasetError) as err:
        index.load_scene(0)
    assert "changed size" in str(err.value)


def test_sceneview_caches_and_evicts(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    for i in range(3):
        _write_png(images / f"s{i}.png", seed=i)
    index = ingest_dataset(images, labels)
    view = SceneView(index, cache_size=1)
    assert len(view) == 3
    first = view[0]
    assert view[0] is first           # cache hit
    second = view[1]                  # evicts scene 0
    assert view[1] is second
    assert view[0] is not first       # re-decoded
    assert torch.equal(view[0].image, first.image)


def test_sceneview_zero_cache_never_holds(tmp_path):
    images, labels = _dataset_dirs(tmp_path)
    _write_png(images / "a.png")
    view = SceneView(ingest_dataset(images, labels), cache_size=0)
    assert view[0] is not view[0]


# ---- CLI ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small on-disk run setup: scene PNGs, labels, guide, YAML config."""
    root = tmp_path_factory.mktemp("cli_ws")
    images = root / "images"
    labels = root / "labels"
    images.mkdir()
    labels.mkdir()
    for i, scene in enumerate(make_toy_scenes(2, seed=21)):
        save_pixels(scene.image, images / f"scene_{i}.png")
        lines = [f"{b.class_id} {b.cx} {b.cy} {b.w} {b.h}" for b in scene.boxes]
        (labels / f"scene_{i}.txt").write_text("\n".join(lines) + "\n")
    save_pixels(make_guide_image(24, seed=5), root / "guide.png")

    config = {
        "guide_image": str(root / "guide.png"),
        "patch_size": 24,
        "output_dir": str(root / "out"),
        "dataset": {"images": str(images), "labels": str(labels)},
        "detector": {"name": "toy"},
        "attack": {
            "epochs": 1,
            "batch_size": 2,
            "lr": 0.01,
            "seed": 7,
            "patch_init": "from_guide",
            "eot": {"rng_seed": 7},
            "creases": {"creases_min": 1, "creases_max": 2},
        },
    }
    (root / "config.yaml").write_text(yaml.safe_dump(config))
    return root


@pytest.fixture(scope="module")
def attack_run(workspace):
    out = workspace / "attack_a"
    code = cli.main(["attack", "--config", str(workspace / "config.yaml"),
                     "--output", str(out)])
    assert code == 0
    return out


def test_attack_writes_artifacts(attack_run):
    for name in ("patch.png", "patch.ckpt", "loss_log.csv",
                 "effective_config.yaml", "manifest.json"):
        assert (attack_run / name).is_file(), name
    rows = (attack_run / "loss_log.csv").read_text().splitlines()
    # 2 scenes, batch 2, 1 epoch -> exactly one optimizer step
    assert rows[0] == "epoch,step,l_det,l_sim,l_tv,l_total"
    assert len(rows) == 2
    assert rows[1].startswith("0,1,")


def test_attack_manifest_describes_run(attack_run):
    manifest = json.loads((attack_run / "manifest.json").read_text())
    assert manifest["command"] == "attack"
    assert manifest["seed"] == 7
    assert manifest["detector"] == "toy"
    assert manifest["detector_weights_sha256"] == "builtin:toy"
    assert len(manifest["config_sha256"]) == 64


def test_attack_reruns_bit_identical(workspace, attack_run):
    out = workspace / "attack_b"
    code = cli.main(["attack", "--config", str(workspace / "config.yaml"),
                     "--output", str(out)])
    assert code == 0
    assert (out / "patch.png").read_bytes() == (attack_run / "patch.png").read_bytes()
    assert (out / "loss_log.csv").read_text() == (attack_run / "loss_log.csv").read_text()


def test_flag_overrides_beat_config_file(workspace):
    out = workspace / "attack_seed9"
    code = cli.main(["attack", "--config", str(workspace / "config.yaml"),
                     "--seed", "9", "--output", str(out)])
    assert code == 0
    effective = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert effective["attack"]["seed"] == 9          # flag wins
    assert effective["attack"]["lr"] == 0.01         # file wins over default
    assert effective["attack"]["adam_beta1"] == 0.9  # untouched default
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9


def test_unknown_config_key_is_usage_error(workspace, tmp_path, capsys):
    base = yaml.safe_load((workspace / "config.yaml").read_text())
    base["attack"]["bogus_knob"] = 1
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(base))
    code = cli.main(["attack", "--config", str(bad)])
    assert code == cli.EXIT_USAGE
    assert "unknown config key" in capsys.readouterr().err


def test_missing_guide_is_usage_error(workspace, tmp_path, capsys):
    base = yaml.safe_load((workspace / "config.yaml").read_text())
    base["guide_image"] = str(tmp_path / "ghost.png")
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(base))
    assert cli.main(["attack", "--config", str(bad)]) == cli.EXIT_USAGE
    assert "guide_image" in capsys.readouterr().err


def test_empty_dataset_exits_with_dataset_code(workspace, tmp_path):
    base = yaml.safe_load((workspace / "config.yaml").read_text())
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    base["dataset"] = {"images": str(tmp_path / "images"),
                       "labels": str(tmp_path / "labels")}
    base["output_dir"] = str(tmp_path / "out")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(base))
    assert cli.main(["attack", "--config", str(cfg)]) == cli.EXIT_DATASET


def test_garbage_weights_exit_with_detector_code(workspace, tmp_path):
    base = yaml.safe_load((workspace / "config.yaml").read_text())
    weights = tmp_path / "weights.pt"
    weights.write_bytes(b"not a checkpoint")
    base["detector"] = {"name": "toy", "weights": str(weights)}
    base["output_dir"] = str(tmp_path / "out")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(base))
    assert cli.main(["attack", "--config", str(cfg)]) == cli.EXIT_DETECTOR


def test_corrupt_checkpoint_exits_with_runtime_code(workspace, tmp_path):
    ckpt = tmp_path / "broken.ckpt"
    ckpt.write_bytes(b"garbage")
    code = cli.main(["export-patch", "--patch", str(ckpt),
                     "--out", str(tmp_path / "o.png")])
    assert code == cli.EXIT_RUNTIME


def test_eval_clean_baseline_is_perfect(workspace, capsys):
    out = workspace / "eval_clean"
    code = cli.main(["eval", "--config", str(workspace / "config.yaml"),
                     "--output", str(out)])
    assert code == 0
    with open(out / "reports" / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["map_50"]) == 100.0
    assert float(rows[0]["recall"]) == 100.0
    assert float(rows[0]["asr"]) == 0.0
    assert rows[0]["detector"] == "toy"
    assert "100.0" in capsys.readouterr().out


def test_eval_bad_defense_is_usage_error(workspace, capsys):
    code = cli.main(["eval", "--config", str(workspace / "config.yaml"),
                     "--patch", str(workspace / "guide.png"),
                     "--defense", "jpeg70"])
    assert code == cli.EXIT_USAGE
    assert "defense" in capsys.readouterr().err


def test_sweep_writes_csv_grid(workspace):
    out = workspace / "sweep_out"
    code = cli.main(["sweep", "--config", str(workspace / "config.yaml"),
                     "--patch", str(workspace / "guide.png"),
                     "--scales", "0.3,0.5", "--creases", "off",
                     "--output", str(out)])
    assert code == 0
    with open(out / "reports" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {r["transform_stack"] for r in rows} == {"scale=0.3", "scale=0.5"}


def test_render_preview_writes_samples(workspace):
    out = workspace / "preview_out"
    code = cli.main(["render-preview", "--config", str(workspace / "config.yaml"),
                     "--patch", str(workspace / "guide.png"),
                     "--count", "1", "--creases",
                     "--output", str(out)])
    assert code == 0
    preview = out / "previews" / "preview_000.png"
    assert preview.is_file()
    assert load_pixels(preview).shape == (416, 416, 3)
    assert list((out / "previews").glob("*.rects.txt"))


def test_export_patch_physical_size(workspace, tmp_path):
    from PIL import Image
    out = tmp_path / "print.png"
    code = cli.main(["export-patch", "--patch", str(workspace / "guide.png"),
                     "--out", str(out), "--dpi", "50",
                     "--width-cm", "2.54", "--height-cm", "5.08"])
    assert code == 0
    with Image.open(out) as img:
        assert img.size == (50, 100)  # (w, h) = cm / 2.54 * dpi


def test_export_patch_rejects_bad_dpi(workspace, tmp_path):
    code = cli.main(["export-patch", "--patch", str(workspace / "guide.png"),
                     "--out", str(tmp_path / "o.png"), "--dpi", "0"])
    assert code == cli.EXIT_USAGE
