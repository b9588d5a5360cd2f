#!/usr/bin/env python3
"""Train the packaged toy person detector on synthetic scenes.

Run once to (re)produce src/advpatch/assets/toy_detector.pt; the weights
ship in the repository so tests never retrain. Training scenes mix in
random occluder squares over person torsos so the detector keeps working
under unoptimized occlusion (only an optimized patch should defeat it).

Usage: python3 scripts/train_toy_detector.py [--epochs 30] [--seed 7]
"""

import argparse
import os
import sys

import numpy as np
import torch
from torch import nn

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from advpatch.boxes import Scene
from advpatch.detectors import TOY_WEIGHTS_VERSION, DetectorHandle, TinyPersonNet
from advpatch.evaluate import build_ground_truth, evaluate_map
from advpatch.toydata import make_toy_scenes


def occlude_persons(scene: Scene, rng: np.random.Generator) -> torch.Tensor:
    """Paste random-texture squares over person centers (cutout-style)."""
    img = scene.image.clone()
    size = img.shape[0]
    for box in scene.boxes:
        if rng.uniform() < 0.35:
            continue
        side = int(round(rng.uniform(0.25, 0.65) * box.h * size))
        if side < 2:
            continue
        cx = int(round(box.cx * size))
        cy = int(round(box.cy * size + rng.uniform(-0.08, 0.08) * box.h * size))
        x0 = max(0, cx - side // 2)
        y0 = max(0, cy - side // 2)
        x1 = min(size, x0 + side)
        y1 = min(size, y0 + side)
        kind = rng.integers(0, 3)
        if kind == 0:
            block = rng.uniform(0, 1, size=(y1 - y0, x1 - x0, 3))
        elif kind == 1:
            block = np.broadcast_to(rng.uniform(0, 1, size=3), (y1 - y0, x1 - x0, 3))
        else:
            base = rng.uniform(0, 1, size=((y1 - y0) // 8 + 1, (x1 - x0) // 8 + 1, 3))
            block = np.kron(base, np.ones((8, 8, 1)))[: y1 - y0, : x1 - x0]
        img[y0:y1, x0:x1] = torch.from_numpy(np.ascontiguousarray(block, dtype=np.float32))
    return img


def build_targets(scenes, grid: int, anchor):
    """Per-cell targets: (obj, tx, ty, tw, th) tensors.

    Only the center cell owns a person; every other cell is a negative,
    which keeps the detector from firing on background or neighbors."""
    n = len(scenes)
    obj = torch.zeros(n, grid, grid)
    txy = torch.zeros(n, grid, grid, 2)
    twh = torch.zeros(n, grid, grid, 2)
    for i, scene in enumerate(scenes):
        for box in scene.boxes:
            gx = min(int(box.cx * grid), grid - 1)
            gy = min(int(box.cy * grid), grid - 1)
            obj[i, gy, gx] = 1.0
            txy[i, gy, gx, 0] = box.cx * grid - gx
            txy[i, gy, gx, 1] = box.cy * grid - gy
            twh[i, gy, gx, 0] = float(np.log(box.w / anchor[0]))
            twh[i, gy, gx, 1] = float(np.log(box.h / anchor[1]))
    return obj, txy, twh


def flat_negatives() -> list[Scene]:
    """Featureless images the detector must stay silent on."""
    scenes = []
    for value in (0.0, 0.1, 0.25, 0.375, 0.5, 0.625, 0.75, 0.9, 1.0):
        scenes.append(Scene(image=torch.full((416, 416, 3), value), boxes=[]))
    for c in ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
              (1.0, 1.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.0, 1.0)):
        img = torch.zeros(416, 416, 3)
        img[..., 0], img[..., 1], img[..., 2] = c
        scenes.append(Scene(image=img, boxes=[]))
    return scenes


def noise_negatives(seed: int) -> list[Scene]:
    """Pure-texture images; the detector must not fire on noise either."""
    g = torch.Generator()
    g.manual_seed(seed)
    return [Scene(image=torch.rand(416, 416, 3, generator=g), boxes=[])
            for _ in range(6)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-train", type=int, default=240)
    parser.add_argument("--out", default=os.path.join(
        os.path.dirname(__file__), "..", "src", "advpatch", "assets", "toy_detector.pt"))
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.Generator(np.random.PCG64(args.seed))

    print(f"generating {args.n_train} training scenes ...")
    scenes = make_toy_scenes(args.n_train, seed=args.seed)
    # person-free scenes and flat images are hard negatives; without them
    # the detector hallucinates on blank inputs
    scenes += make_toy_scenes(args.n_train // 2, seed=args.seed + 500,
                              min_persons=0, max_persons=0)
    scenes += 3 * flat_negatives()
    scenes += noise_negatives(args.seed + 900)
    grid = 416 // TinyPersonNet.STRIDE
    anchor = TinyPersonNet.ANCHOR
    obj_t, txy_t, twh_t = build_targets(scenes, grid, anchor)

    net = TinyPersonNet()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [args.epochs * 3 // 4], 0.2)
    bce = nn.BCEWithLogitsLoss(reduction="none")
    batch_size = 8

    net.train()
    for epoch in range(args.epochs):
        order = rng.permutation(len(scenes))
        epoch_loss = 0.0
        for start in range(0, len(scenes), batch_size):
            idx = order[start:start + batch_size]
            images = torch.stack([occlude_persons(scenes[i], rng) for i in idx])
            images = images.permute(0, 3, 1, 2)
            raw = net(images).permute(0, 2, 3, 1)  # (B, g, g, 6)

            o = obj_t[idx]
            pos = o > 0.5

            # balance the two populations: the negative mean must not get
            # diluted by cell count or the detector hallucinates everywhere
            obj_bce = bce(raw[..., 4], o)
            obj_loss = 2.0 * obj_bce[~pos].mean()
            if pos.any():
                obj_loss = obj_loss + obj_bce[pos].mean()
                xy_loss = ((torch.sigmoid(raw[..., 0:2]) - txy_t[idx])[pos] ** 2).mean()
                wh_loss = ((raw[..., 2:4] - twh_t[idx])[pos] ** 2).mean()
                cls_loss = bce(raw[..., 5], o)[pos].mean()
            else:
                xy_loss = wh_loss = cls_loss = torch.tensor(0.0)

            loss = obj_loss + 2.0 * xy_loss + 2.0 * wh_loss + cls_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss)
        sched.step()
        print(f"epoch {epoch + 1:3d}  loss {epoch_loss / max(1, len(scenes) // batch_size):.4f}")

    net.eval()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    torch.save({"version": TOY_WEIGHTS_VERSION, "state_dict": net.state_dict()}, args.out)
    print(f"saved weights to {args.out}")

    handle = DetectorHandle(name="toy", module=net)
    eval_scenes = make_toy_scenes(40, seed=args.seed + 1000)
    gt = build_ground_truth(handle, eval_scenes)
    clean = evaluate_map(handle, eval_scenes, patch=None, ground_truth=gt)
    found = sum(len(b) for b in gt.boxes_per_image)
    total = sum(len(s.boxes) for s in eval_scenes)
    print(f"self-check: clean-protocol mAP {clean.map_50:.3f} (fixed point, must be 100)")
    print(f"detector finds {found} boxes where the generator placed {total}")

    # precision/recall against the generator labels gauge whether the
    # detector is a sane person detector, not just self-consistent
    from advpatch.boxes import box_iou
    from advpatch.detectors import detect, forward
    tp = fp = n_gt = 0
    for scene in eval_scenes:
        dets = detect(handle, scene.image)
        taken = [False] * len(scene.boxes)
        n_gt += len(scene.boxes)
        for d in dets:
            best, best_i = 0.0, -1
            for i, b in enumerate(scene.boxes):
                if taken[i]:
                    continue
                v = box_iou(d.box, b)
                if v > best:
                    best, best_i = v, i
            if best >= 0.5:
                taken[best_i] = True
                tp += 1
            else:
                fp += 1
    precision = tp / max(tp + fp, 1)
    recall = tp / max(n_gt, 1)
    print(f"vs generator labels: precision {precision:.3f} recall {recall:.3f}")

    with torch.no_grad():
        worst = 0.0
        for flat in flat_negatives():
            dets = forward(handle, flat.image)
            worst = max(worst, max(float(d.objectness) for d in dets))
        zeros_max = max(float(d.objectness)
                        for d in forward(handle, torch.zeros(416, 416, 3)))
    print(f"all-zeros image: max objectness {zeros_max:.6f} (regression pin)")
    print(f"worst flat-image objectness {worst:.6f}")
    if worst >= 0.3 or precision < 0.85 or recall < 0.9 or clean.map_50 != 100.0:
        print("SELF-CHECK FAILED", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
