import numpy as np
import pytest
import torch

from advpatch.darknet import (DarknetNet, load_darknet_detector,
                              load_darknet_weights, parse_darknet_cfg,
                              save_darknet_weights)
from advpatch.detectors import DetectorLoadError, forward

MINI_CFG = """
[net]
width=64
height=64
channels=3

[convolutional]
batch_normalize=1
filters=8
size=3
stride=4
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
filters=18
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1,2
anchors=10,14, 23,27, 37,58
classes=1
"""


def build_mini(seed=0):
    torch.manual_seed(seed)
    net = DarknetNet(parse_darknet_cfg(MINI_CFG))
    # randomize so roundtrip checks exercise nontrivial values
    with torch.no_grad():
        for p in net.parameters():
            p.uniform_(-0.5, 0.5)
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
    net.eval()
    return net


# ---- cfg parsing ------------------------------------------------------------

def test_parse_sections_in_order():
    sections = parse_darknet_cfg(MINI_CFG)
    assert [name for name, _ in sections] == [
        "net", "convolutional", "maxpool", "convolutional", "yolo"]
    assert sections[1][1]["filters"] == "8"


def test_parse_strips_comments():
    text = "[net]\nwidth=32 # inline comment\nheight=32\nchannels=3\n# whole line\n[yolo]\nanchors=1,1\nclasses=1\n"
    sections = parse_darknet_cfg(text)
    assert sections[0][1]["width"] == "32"


def test_parse_rejects_option_before_section():
    with pytest.raises(DetectorLoadError):
        parse_darknet_cfg("width=416\n[net]\n")


def test_parse_rejects_missing_net():
    with pytest.raises(DetectorLoadError):
        parse_darknet_cfg("[convolutional]\nfilters=4\n")


def test_parse_rejects_bad_line():
    with pytest.raises(DetectorLoadError):
        parse_darknet_cfg("[net]\nwidth 416\n")


def test_build_rejects_unknown_section():
    with pytest.raises(DetectorLoadError):
        DarknetNet(parse_darknet_cfg("[net]\nwidth=32\nheight=32\n[gru]\nx=1\n"))


def test_build_rejects_headless():
    cfg = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nfilters=4\nsize=1\nactivation=linear\n"
    with pytest.raises(DetectorLoadError):
        DarknetNet(parse_darknet_cfg(cfg))


def test_build_rejects_nonsquare():
    with pytest.raises(DetectorLoadError):
        DarknetNet(parse_darknet_cfg("[net]\nwidth=64\nheight=32\nchannels=3\n[yolo]\nanchors=1,1\nclasses=1\n"))


# ---- weights io -------------------------------------------------------------

def test_weights_roundtrip(tmp_path):
    net = build_mini(seed=3)
    path = tmp_path / "mini.weights"
    save_darknet_weights(net, path)

    net2 = DarknetNet(parse_darknet_cfg(MINI_CFG))
    load_darknet_weights(net2, path)
    net2.eval()

    for (na, pa), (nb, pb) in zip(net.state_dict().items(), net2.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb), na

    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        a = net.predict_grid(x)
        b = net2.predict_grid(x)
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)


def test_weights_too_short(tmp_path):
    path = tmp_path / "short.weights"
    path.write_bytes(b"\x00" * 8)
    with pytest.raises(DetectorLoadError):
        load_darknet_weights(build_mini(), path)


def test_weights_truncated_payload(tmp_path):
    net = build_mini()
    path = tmp_path / "trunc.weights"
    save_darknet_weights(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 40])
    with pytest.raises(DetectorLoadError) as err:
        load_darknet_weights(DarknetNet(parse_darknet_cfg(MINI_CFG)), path)
    assert "exhausted" in str(err.value)


def test_weights_surplus_rejected(tmp_path):
    net = build_mini()
    path = tmp_path / "long.weights"
    save_darknet_weights(net, path)
    with open(path, "ab") as fh:
        fh.write(np.zeros(10, dtype=np.float32).tobytes())
    with pytest.raises(DetectorLoadError) as err:
        load_darknet_weights(DarknetNet(parse_darknet_cfg(MINI_CFG)), path)
    assert "unused" in str(err.value)


def test_weights_old_header_four_byte_seen(tmp_path):
    # pre-0.2 headers carry a 4-byte seen counter
    net = build_mini(seed=9)
    path = tmp_path / "old.weights"
    save_darknet_weights(net, path)
    payload = path.read_bytes()[12 + 8:]
    header = np.array([0, 1, 0], dtype=np.int32).tobytes()
    header += np.array([0], dtype=np.int32).tobytes()
    path.write_bytes(header + payload)
    net2 = DarknetNet(parse_darknet_cfg(MINI_CFG))
    load_darknet_weights(net2, path)
    assert torch.equal(net2.layers[0].conv.weight, net.layers[0].conv.weight)


def test_missing_files_name_paths(tmp_path):
    with pytest.raises(DetectorLoadError) as err:
        load_darknet_detector(tmp_path / "absent.cfg", tmp_path / "absent.weights")
    assert "absent.cfg" in str(err.value)


# ---- decode math ------------------------------------------------------------

def test_decode_shapes_and_ranges():
    net = build_mini(seed=1)
    x = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        boxes, obj, cls = net.predict_grid(x)
    # stride 4 conv then stride 2 pool -> 8x8 grid, 3 anchors
    assert boxes.shape == (2, 8 * 8 * 3, 4)
    assert obj.shape == (2, 8 * 8 * 3)
    assert cls.shape == (2, 8 * 8 * 3, 1)
    assert float(obj.min()) >= 0.0 and float(obj.max()) <= 1.0
    assert float(cls.min()) >= 0.0 and float(cls.max()) <= 1.0
    assert float(boxes[..., 0].min()) >= 0.0 and float(boxes[..., 0].max()) <= 1.0


def test_decode_matches_hand_math():
    net = build_mini(seed=4)
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(6))
    with torch.no_grad():
        fmap = net._run(x)[0]
        boxes, obj, cls = net.predict_grid(x)

    n, _, gh, gw = fmap.shape
    raw = fmap.view(1, 3, 6, gh, gw).permute(0, 1, 3, 4, 2)
    anchors = net.heads[0].anchors
    # check one arbitrary (anchor, cell)
    a, cy_i, cx_i = 1, 3, 5
    r = raw[0, a, cy_i, cx_i]
    j = a * gh * gw + cy_i * gw + cx_i
    assert float(boxes[0, j, 0]) == pytest.approx(
        (torch.sigmoid(r[0]).item() + cx_i) / gw, rel=1e-6)
    assert float(boxes[0, j, 1]) == pytest.approx(
        (torch.sigmoid(r[1]).item() + cy_i) / gh, rel=1e-6)
    assert float(boxes[0, j, 2]) == pytest.approx(
        float(torch.exp(r[2])) * anchors[a][0] / 64.0, rel=1e-6)
    assert float(boxes[0, j, 3]) == pytest.approx(
        float(torch.exp(r[3])) * anchors[a][1] / 64.0, rel=1e-6)
    assert float(obj[0, j]) == pytest.approx(float(torch.sigmoid(r[4])), rel=1e-6)
    assert float(cls[0, j, 0]) == pytest.approx(float(torch.sigmoid(r[5])), rel=1e-6)


def test_grouped_route_halves_channels():
    cfg = """
[net]
width=32
height=32
channels=3

[convolutional]
filters=8
size=3
stride=2
pad=1
activation=leaky

[route]
layers=-1
groups=2
group_id=1

[convolutional]
filters=12
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1
anchors=10,14, 23,27
classes=1
"""
    net = DarknetNet(parse_darknet_cfg(cfg))
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    boxes, obj, cls = net.predict_grid(x)
    assert obj.shape == (1, 16 * 16 * 2)

    # the route must select the SECOND half of the conv's channels
    conv_out = net.layers[0](x)
    second_half = conv_out[:, 4:]
    manual = net.layers[2](second_half)
    fmap = net._run(x)[0]
    assert torch.equal(fmap, manual)


def test_shortcut_adds_layers():
    cfg = """
[net]
width=32
height=32
channels=3

[convolutional]
filters=8
size=3
stride=2
pad=1
activation=leaky

[convolutional]
filters=8
size=3
stride=1
pad=1
activation=leaky

[shortcut]
from=-2
activation=linear

[convolutional]
filters=12
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1
anchors=10,14, 23,27
classes=1
"""
    net = DarknetNet(parse_darknet_cfg(cfg))
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(8))
    a = net.layers[0](x)
    b = net.layers[1](a)
    manual = net.layers[3](a + b)
    fmap = net._run(x)[0]
    assert torch.equal(fmap, manual)


def test_maxpool_stride_one_keeps_size():
    cfg = """
[net]
width=32
height=32
channels=3

[convolutional]
filters=4
size=3
stride=2
pad=1
activation=leaky

[maxpool]
size=2
stride=1

[convolutional]
filters=12
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1
anchors=10,14, 23,27
classes=1
"""
    net = DarknetNet(parse_darknet_cfg(cfg))
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(3))
    boxes, obj, cls = net.predict_grid(x)
    assert obj.shape == (1, 16 * 16 * 2)  # pool left the 16x16 grid alone


# ---- handle integration ------------------------------------------------------

def test_detector_handle_integration(tmp_path):
    cfg_path = tmp_path / "mini.cfg"
    cfg_path.write_text(MINI_CFG)
    weights_path = tmp_path / "mini.weights"
    save_darknet_weights(build_mini(seed=11), weights_path)

    handle = load_darknet_detector(cfg_path, weights_path)
    assert handle.name == "mini"
    assert handle.input_size == 64
    with torch.no_grad():
        dets = forward(handle, torch.rand(64, 64, 3,
                                          generator=torch.Generator().manual_seed(1)))
    assert len(dets) == 8 * 8 * 3
    assert all(0.0 <= float(d.objectness) <= 1.0 for d in dets)
