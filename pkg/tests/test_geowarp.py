import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from limbvton.geowarp import (
    AffineParams,
    affine_apply,
    flow_warp,
    patchify,
    resize_flow,
    sobel_gradients,
    unpatch,
)

from oracles import affine_oracle, flow_oracle, gradient_check


def test_affine_identity_is_exact():
    x = torch.rand(3, 16, 12)
    assert torch.allclose(affine_apply(x, AffineParams()), x, atol=1e-6)


def test_affine_integer_translation():
    x = torch.rand(1, 32, 32)
    out = affine_apply(x, AffineParams.from_pixel_shift(10, 0, 32, 32))
    assert torch.allclose(out[..., 10:], x[..., :-10], atol=1e-5)
    assert torch.all(out[..., :10] == 0)


def test_affine_scale_matches_oracle_on_square():
    m = torch.zeros(1, 32, 32)
    m[:, 12:20, 12:20] = 1
    out = affine_apply(m, AffineParams(2.0, 2.0, 0.0, 0.0))
    ref = affine_oracle(m.double().numpy(), 2.0, 2.0, 0.0, 0.0, 0.0)
    assert np.abs(out.numpy() - ref).max() <= 1e-6
    # sampling twice as far shrinks the square to a quarter of its area
    assert out.sum().item() == pytest.approx(m.sum().item() / 4, rel=0.05)


def test_affine_white_fill_for_cloth():
    x = torch.zeros(3, 8, 8)
    out = affine_apply(x, AffineParams(1.0, 1.0, 1.0, 0.0), fill=1.0)
    assert torch.all(out[..., -2:] == 1.0)


@pytest.mark.parametrize("bad", [AffineParams(0.0, 1.0), AffineParams(1.0, float("nan"))])
def test_affine_rejects_bad_params(bad):
    with pytest.raises(ValueError):
        affine_apply(torch.rand(1, 4, 4), bad)


def test_flow_zero_is_identity():
    x = torch.rand(2, 3, 9, 7)
    assert torch.equal(flow_warp(x, torch.zeros(2, 2, 9, 7)), x) or torch.allclose(
        flow_warp(x, torch.zeros(2, 2, 9, 7)), x, atol=1e-6
    )


def test_flow_backward_convention():
    x = torch.rand(1, 6, 8)
    flow = torch.zeros(2, 6, 8)
    flow[0] = 1.0
    out = flow_warp(x, flow)
    assert torch.allclose(out[..., :-1], x[..., 1:], atol=1e-6)
    assert torch.all(out[..., -1] == 0)


def test_flow_matches_double_loop_oracle():
    g = torch.Generator().manual_seed(3)
    img = torch.rand(2, 5, 5, generator=g, dtype=torch.float64)
    flow = (torch.rand(2, 5, 5, generator=g, dtype=torch.float64) - 0.5) * 4
    out = flow_warp(img, flow, fill=0.5)
    ref = flow_oracle(img.numpy(), flow.numpy(), 0.5)
    assert np.abs(out.numpy() - ref).max() <= 1e-6


def test_flow_rejects_resolution_mismatch():
    with pytest.raises(ValueError):
        flow_warp(torch.rand(1, 4, 4), torch.zeros(2, 4, 5))


def test_flow_gradient_wrt_flow():
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64)
    flow = (torch.rand(1, 2, 6, 6, generator=g, dtype=torch.float64) - 0.5) * 3 + 0.37
    err = gradient_check(lambda f: (flow_warp(img, f) ** 2).sum(), flow, n_coords=20)
    assert err <= 1e-3


def test_flow_gradient_wrt_image():
    g = torch.Generator().manual_seed(1)
    img = torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64)
    flow = (torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64) - 0.5) * 2
    err = gradient_check(lambda x: (flow_warp(x, flow) ** 2).sum(), img)
    assert err <= 1e-3


def test_resize_flow_same_size_identity():
    f = torch.randn(2, 5, 7)
    assert torch.equal(resize_flow(f, (5, 7)), f)


def test_resize_flow_rescales_values():
    f = torch.zeros(2, 6, 10)
    f[0] = 2.0
    out = resize_flow(f, (6, 20))
    assert torch.allclose(out[0], torch.full((6, 20), 4.0))
    assert torch.allclose(out[1], torch.zeros(6, 20))


def _smooth_flow(h, w, seed):
    # lowest cosine modes scaled to a 1 px peak: the up/down round trip errs by 1/8 of the
    # second difference, so the field must be slowly varying at this resolution
    g = torch.Generator().manual_seed(seed)
    ys = (torch.arange(h) + 0.5).view(-1, 1) / h
    xs = (torch.arange(w) + 0.5).view(1, -1) / w
    f = torch.zeros(2, h, w)
    for c in range(2):
        for ky in range(2):
            for kx in range(2):
                coef = torch.rand(1, generator=g).item() * 2 - 1
                f[c] += coef * torch.cos(np.pi * ky * ys) * torch.cos(np.pi * kx * xs)
    return f / f.abs().max()


@pytest.mark.parametrize("seed", range(5))
def test_resize_flow_round_trip_smooth(seed):
    f = _smooth_flow(64, 48, seed)
    back = resize_flow(resize_flow(f, (128, 96)), (64, 48))
    assert (back - f).abs().max() <= 1e-3


def test_patchify_s1_and_definition():
    x = torch.arange(16.0).view(1, 4, 4)
    assert torch.equal(patchify(x, 1), x)
    p = patchify(x, 2)
    assert p.shape == (4, 2, 2)
    assert torch.equal(p[0], torch.tensor([[0.0, 1.0], [4.0, 5.0]]))
    assert torch.equal(p[1], torch.tensor([[2.0, 3.0], [6.0, 7.0]]))
    assert torch.equal(p[2], torch.tensor([[8.0, 9.0], [12.0, 13.0]]))


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError, match="divide"):
        patchify(torch.zeros(1, 10, 8), 4)


@settings(max_examples=1000, deadline=None)
@given(s=st.sampled_from([2, 4, 8]), a=st.integers(1, 3), b=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_patchify_round_trip(s, a, b, seed):
    x = torch.randn(1, s * a, s * b, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(unpatch(patchify(x, s)), x)


def test_sobel_constant_is_zero():
    assert torch.all(sobel_gradients(torch.full((2, 6, 6), 0.3)) == 0)


def test_sobel_step_edge():
    x = torch.zeros(1, 7, 8)
    x[..., 4:] = 1.0
    g = sobel_gradients(x)
    assert g.shape == (2, 7, 8)
    assert torch.allclose(g[0, 1:-1, 3], torch.full((5,), 4.0))
    assert torch.allclose(g[0, 1:-1, 4], torch.full((5,), 4.0))
    assert torch.all(g[0, :, :3] == 0) and torch.all(g[0, :, 5:] == 0)
    assert torch.all(g[1] == 0)


def test_sobel_linear():
    a, b = torch.rand(3, 9, 9), torch.rand(3, 9, 9)
    assert torch.allclose(sobel_gradients(a + b), sobel_gradients(a) + sobel_gradients(b), atol=1e-5)


def test_sobel_translation_equivariant_interior():
    x = torch.rand(1, 12, 12)
    shifted = torch.roll(x, shifts=(2, 3), dims=(1, 2))
    g, gs = sobel_gradients(x), sobel_gradients(shifted)
    assert torch.allclose(torch.roll(g, (2, 3), (1, 2))[:, 4:-2, 5:-2], gs[:, 4:-2, 5:-2], atol=1e-6)
