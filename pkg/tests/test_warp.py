import torch
import torch.nn.functional as F

from advpatch.warp import bilinear_sample, pixel_grid, resize_image, rotate_image
from oracles import compare_gradients


def test_pixel_grid_values():
    xs, ys = pixel_grid(2, 3)
    assert xs.tolist() == [[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]]
    assert ys.tolist() == [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]


def test_bilinear_integer_coords_exact(gen):
    p = torch.rand(5, 7, 3, generator=gen)
    xs, ys = pixel_grid(5, 7)
    out = bilinear_sample(p, xs, ys)
    assert torch.equal(out, p)


def test_bilinear_midpoint_average():
    p = torch.zeros(2, 2, 1)
    p[0, 0] = 1.0
    p[1, 1] = 1.0
    out = bilinear_sample(p, torch.tensor([[0.5]]), torch.tensor([[0.5]]))
    assert abs(float(out) - 0.5) < 1e-7


def test_bilinear_edge_clamp(gen):
    p = torch.rand(4, 4, 3, generator=gen)
    far = torch.tensor([[-10.0, 99.0]])
    out = bilinear_sample(p, far, torch.tensor([[0.0, 3.0]]))
    assert torch.allclose(out[0, 0], p[0, 0])
    assert torch.allclose(out[0, 1], p[3, 3])


def test_bilinear_matches_grid_sample(gen):
    # same convention as grid_sample with align_corners=True, border padding
    p = torch.rand(9, 6, 3, generator=gen)
    x = torch.rand(5, 4, generator=gen) * 7.0 - 1.0
    y = torch.rand(5, 4, generator=gen) * 10.0 - 1.0
    got = bilinear_sample(p, x, y)

    norm_x = (x.clamp(0, 5) / 5.0) * 2 - 1
    norm_y = (y.clamp(0, 8) / 8.0) * 2 - 1
    grid = torch.stack([norm_x, norm_y], dim=-1).unsqueeze(0)
    want = F.grid_sample(p.permute(2, 0, 1).unsqueeze(0), grid,
                         mode="bilinear", padding_mode="border",
                         align_corners=True)
    want = want.squeeze(0).permute(1, 2, 0)
    assert float((got - want).abs().max()) < 1e-6


def test_bilinear_gradient_matches_fd(gen):
    x = torch.rand(6, 6, generator=gen) * 7.0
    y = torch.rand(6, 6, generator=gen) * 7.0

    def fn(p):
        return bilinear_sample(p, x.double(), y.double()).mean()

    bad = compare_gradients(fn, torch.rand(8, 8, 3, generator=gen),
                            n_coords=24, generator=gen)
    assert bad == []


def test_rotate_zero_is_passthrough(gen):
    p = torch.rand(8, 8, 3, generator=gen)
    assert rotate_image(p, 0.0) is p


def test_rotate_constant_invariant():
    p = torch.full((15, 15, 3), 0.66)
    out = rotate_image(p, 37.0)
    assert float((out - p).abs().max()) < 1e-6


def test_rotate_90_matches_rot90(gen):
    p = torch.rand(8, 8, 3, generator=gen)
    out = rotate_image(p, 90.0)
    assert float((out - torch.rot90(p, k=-1, dims=(0, 1))).abs().max()) < 1e-5


def test_rotate_2x2_hand_case():
    p = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).unsqueeze(-1)
    out = rotate_image(p, 90.0)
    assert torch.allclose(out.squeeze(-1), torch.tensor([[3.0, 1.0], [4.0, 2.0]]),
                          atol=1e-5)


def test_rotate_roundtrip_interior(gen):
    # smooth image: rotating there and back reproduces the interior
    xs, ys = pixel_grid(32, 32)
    img = (0.5 + 0.3 * torch.sin(xs / 6.0) * torch.cos(ys / 7.0)).unsqueeze(-1)
    back = rotate_image(rotate_image(img, 15.0), -15.0)
    err = (back - img).abs()[8:24, 8:24]
    assert float(err.max()) < 0.02


def test_resize_identity_passthrough(gen):
    p = torch.rand(6, 6, 3, generator=gen)
    assert resize_image(p, 6, 6) is p


def test_resize_constant(gen):
    p = torch.full((7, 5, 3), 0.23)
    for h, w in ((14, 10), (3, 2), (7, 9)):
        out = resize_image(p, h, w)
        assert out.shape == (h, w, 3)
        assert float((out - 0.23).abs().max()) < 1e-6


def test_resize_matches_interpolate(gen):
    p = torch.rand(11, 7, 3, generator=gen)
    for h, w in ((22, 14), (5, 4), (16, 3), (11, 13)):
        got = resize_image(p, h, w)
        want = F.interpolate(p.permute(2, 0, 1).unsqueeze(0), size=(h, w),
                             mode="bilinear", align_corners=False)
        want = want.squeeze(0).permute(1, 2, 0)
        assert float((got - want).abs().max()) < 1e-6, (h, w)


def test_resize_gradient_matches_fd(gen):
    def fn(p):
        return resize_image(p, 13, 9).mean()

    bad = compare_gradients(fn, torch.rand(8, 8, 3, generator=gen),
                            n_coords=24, generator=gen)
    assert bad == []
