"""Adapter for darknet-format one-stage detectors (cfg + binary weights).

Builds a torch module from a darknet cfg file, loads the matching
.weights binary, and exposes the same predict_grid interface as the
built-in toy detector, so a pretrained person detector drops into the
rest of the pipeline through a DetectorHandle. Weights are referenced
by path and never bundled.

Supported sections: net, convolutional, maxpool, upsample, route
(including grouped routes), shortcut, yolo. That covers the v3/v3-tiny/
v4/v4-tiny family.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .detectors import DetectorHandle, DetectorLoadError


def parse_darknet_cfg(text: str) -> list[tuple[str, dict]]:
    """Sections as (name, options) pairs, in file order."""
    sections: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip(), {}))
            continue
        if "=" not in line:
            raise DetectorLoadError(f"cfg line {lineno}: expected key=value, got {raw!r}")
        if not sections:
            raise DetectorLoadError(f"cfg line {lineno}: option before any section")
        key, value = (part.strip() for part in line.split("=", 1))
        sections[-1][1][key] = value
    if not sections or sections[0][0] not in ("net", "network"):
        raise DetectorLoadError("cfg must start with a [net] section")
    return sections


def _ints(value: str) -> list[int]:
    return [int(v.strip()) for v in value.split(",") if v.strip()]


def _floats(value: str) -> list[float]:
    return [float(v.strip()) for v in value.split(",") if v.strip()]


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, options: dict):
        super().__init__()
        filters = int(options.get("filters", 1))
        size = int(options.get("size", 1))
        stride = int(options.get("stride", 1))
        pad = (size - 1) // 2 if int(options.get("pad", 0)) else int(options.get("padding", 0))
        self.batch_normalize = int(options.get("batch_normalize", 0)) == 1
        self.conv = nn.Conv2d(in_ch, filters, size, stride, pad,
                              bias=not self.batch_normalize)
        self.bn = nn.BatchNorm2d(filters, eps=1e-5) if self.batch_normalize else None
        activation = options.get("activation", "linear")
        if activation == "leaky":
            self.act: nn.Module = nn.LeakyReLU(0.1, inplace=False)
        elif activation == "linear":
            self.act = nn.Identity()
        else:
            raise DetectorLoadError(f"unsupported activation {activation!r}")
        self.out_channels = filters

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return self.act(x)


class _MaxPool(nn.Module):
    def __init__(self, options: dict):
        super().__init__()
        size = int(options.get("size", 2))
        stride = int(options.get("stride", size))
        if stride == 1:
            # darknet pools with same-size output here; pad bottom/right
            self.pad: nn.Module = nn.ZeroPad2d((0, size - 1, 0, size - 1))
            self.pool = nn.MaxPool2d(size, 1)
        else:
            self.pad = nn.Identity()
            self.pool = nn.MaxPool2d(size, stride)

    def forward(self, x):
        return self.pool(self.pad(x))


class _YoloHead:
    """Decode parameters for one detection scale."""

    def __init__(self, options: dict):
        anchors = _floats(options["anchors"])
        mask = _ints(options.get("mask", ""))
        pairs = [(anchors[2 * i], anchors[2 * i + 1]) for i in range(len(anchors) // 2)]
        self.anchors = [pairs[m] for m in mask] if mask else pairs
        self.classes = int(options.get("classes", 80))


class DarknetNet(nn.Module):
    """Torch twin of a darknet cfg; predict_grid matches the toy detector."""

    def __init__(self, sections: list[tuple[str, dict]]):
        super().__init__()
        net_opts = sections[0][1]
        self.input_size = int(net_opts.get("width", 416))
        if int(net_opts.get("height", self.input_size)) != self.input_size:
            raise DetectorLoadError("only square inputs are supported")

        self.layers = nn.ModuleList()
        self.layer_specs: list[tuple[str, dict]] = []
        self.heads: list[_YoloHead] = []
        channels: list[int] = []
        in_ch = int(net_opts.get("channels", 3))

        for name, options in sections[1:]:
            if name == "convolutional":
                block = _ConvBlock(in_ch, options)
                self.layers.append(block)
                in_ch = block.out_channels
            elif name == "maxpool":
                self.layers.append(_MaxPool(options))
            elif name == "upsample":
                stride = int(options.get("stride", 2))
                self.layers.append(nn.Upsample(scale_factor=stride, mode="nearest"))
            elif name == "route":
                refs = _ints(options["layers"])
                idx = len(channels)
                refs = [r if r >= 0 else idx + r for r in refs]
                groups = int(options.get("groups", 1))
                total = sum(channels[r] for r in refs)
                if total % groups:
                    raise DetectorLoadError(
                        f"route channels {total} not divisible by groups {groups}")
                in_ch = total // groups
                options = dict(options, _refs=refs)
                self.layers.append(nn.Identity())
            elif name == "shortcut":
                src = int(options["from"])
                idx = len(channels)
                options = dict(options, _refs=[src if src >= 0 else idx + src])
                self.layers.append(nn.Identity())
            elif name == "yolo":
                self.heads.append(_YoloHead(options))
                self.layers.append(nn.Identity())
            else:
                raise DetectorLoadError(f"unsupported cfg section [{name}]")
            self.layer_specs.append((name, options))
            channels.append(in_ch)

        if not self.heads:
            raise DetectorLoadError("cfg defines no [yolo] section")

    def _run(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs: list[torch.Tensor] = []
        head_maps: list[torch.Tensor] = []
        for i, (name, options) in enumerate(self.layer_specs):
            if name == "route":
                refs = options["_refs"]
                joined = torch.cat([outputs[r] for r in refs], dim=1)
                groups = int(options.get("groups", 1))
                if groups > 1:
                    group_id = int(options.get("group_id", 0))
                    joined = torch.chunk(joined, groups, dim=1)[group_id]
                x = joined
            elif name == "shortcut":
                x = outputs[-1] + outputs[options["_refs"][0]]
            elif name == "yolo":
                head_maps.append(outputs[-1])
                x = outputs[-1]
            else:
                x = self.layers[i](x)
            outputs.append(x)
        return head_maps

    def predict_grid(self, images: torch.Tensor):
        """(N, 3, S, S) in [0, 1] -> boxes (N, M, 4) cxcywh normalized,
        objectness (N, M), class probabilities (N, M, C)."""
        head_maps = self._run(images)
        all_boxes, all_obj, all_cls = [], [], []
        for head, fmap in zip(self.heads, head_maps):
            n, _, gh, gw = fmap.shape
            na = len(head.anchors)
            nc = head.classes
            raw = fmap.view(n, na, 5 + nc, gh, gw).permute(0, 1, 3, 4, 2)
            gy, gx = torch.meshgrid(torch.arange(gh, dtype=fmap.dtype),
                                    torch.arange(gw, dtype=fmap.dtype),
                                    indexing="ij")
            cx = (torch.sigmoid(raw[..., 0]) + gx) / gw
            cy = (torch.sigmoid(raw[..., 1]) + gy) / gh
            anchor_w = torch.tensor([a[0] for a in head.anchors], dtype=fmap.dtype)
            anchor_h = torch.tensor([a[1] for a in head.anchors], dtype=fmap.dtype)
            bw = torch.exp(raw[..., 2]) * anchor_w.view(1, na, 1, 1) / self.input_size
            bh = torch.exp(raw[..., 3]) * anchor_h.view(1, na, 1, 1) / self.input_size
            obj = torch.sigmoid(raw[..., 4])
            cls = torch.sigmoid(raw[..., 5:])
            boxes = torch.stack((cx, cy, bw, bh), dim=-1)
            all_boxes.append(boxes.reshape(n, -1, 4))
            all_obj.append(obj.reshape(n, -1))
            all_cls.append(cls.reshape(n, -1, nc))
        return (torch.cat(all_boxes, dim=1), torch.cat(all_obj, dim=1),
                torch.cat(all_cls, dim=1))


def _conv_blocks(net: DarknetNet) -> list[_ConvBlock]:
    return [m for m in net.layers if isinstance(m, _ConvBlock)]


def load_darknet_weights(net: DarknetNet, path) -> None:
    """Fill conv/BN parameters from a darknet .weights binary, in cfg order."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DetectorLoadError(f"cannot read weights at {path}: {exc}") from exc
    if len(blob) < 12:
        raise DetectorLoadError(f"weights at {path} too short for a header")
    major, minor, _revision = np.frombuffer(blob[:12], dtype=np.int32)
    offset = 12
    seen_bytes = 8 if major * 10 + minor >= 2 else 4
    offset += seen_bytes
    values = np.frombuffer(blob[offset:], dtype=np.float32)

    cursor = 0

    def take(count: int) -> torch.Tensor:
        nonlocal cursor
        if cursor + count > len(values):
            raise DetectorLoadError(
                f"weights at {path} exhausted: wanted {count} more floats, "
                f"{len(values) - cursor} left")
        out = torch.from_numpy(values[cursor:cursor + count].copy())
        cursor += count
        return out

    with torch.no_grad():
        for block in _conv_blocks(net):
            conv = block.conv
            n = conv.out_channels
            if block.bn is not None:
                block.bn.bias.copy_(take(n))
                block.bn.weight.copy_(take(n))
                block.bn.running_mean.copy_(take(n))
                block.bn.running_var.copy_(take(n))
            else:
                conv.bias.copy_(take(n))
            conv.weight.copy_(take(conv.weight.numel()).view_as(conv.weight))
    if cursor != len(values):
        raise DetectorLoadError(
            f"weights at {path} have {len(values) - cursor} unused floats; "
            f"cfg and weights do not match")


def save_darknet_weights(net: DarknetNet, path) -> None:
    """Inverse of load_darknet_weights; used for round-trip checks."""
    chunks = [np.array([0, 2, 0], dtype=np.int32).tobytes(),
              np.array([0], dtype=np.int64).tobytes()]
    for block in _conv_blocks(net):
        conv = block.conv
        if block.bn is not None:
            for tensor in (block.bn.bias, block.bn.weight,
                           block.bn.running_mean, block.bn.running_var):
                chunks.append(tensor.detach().numpy().astype(np.float32).tobytes())
        else:
            chunks.append(conv.bias.detach().numpy().astype(np.float32).tobytes())
        chunks.append(conv.weight.detach().numpy().astype(np.float32).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_darknet_detector(cfg_path, weights_path, person_class_index: int = 0,
                          conf_threshold: float = 0.5,
                          name: str | None = None) -> DetectorHandle:
    """Build and load an external detector as a plug-in DetectorHandle."""
    cfg_path = Path(cfg_path)
    try:
        text = cfg_path.read_text()
    except OSError as exc:
        raise DetectorLoadError(f"cannot read cfg at {cfg_path}: {exc}") from exc
    net = DarknetNet(parse_darknet_cfg(text))
    load_darknet_weights(net, weights_path)
    return DetectorHandle(name=name or cfg_path.stem, module=net,
                          person_class_index=person_class_index,
                          conf_threshold=conf_threshold,
                          input_size=net.input_size)
