import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oneshotseg.diffops import ShapeError, grad_check
from oneshotseg.volume import LabelMap
from oneshotseg.warp import field_gradient, grid_sample_trilinear, one_hot, warp_labels


def trilinear_point(vol, p):
    """Reference clamped trilinear lookup of a single point, float64."""
    dims = vol.shape
    corners = []
    for pi, n in zip(p, dims):
        pi = min(max(pi, 0.0), n - 1)
        lo = min(int(math.floor(pi)), n - 2)
        corners.append(((lo, 1 - (pi - lo)), (lo + 1, pi - lo)))
    return sum(wa * wb * wc * vol[a, b, c]
               for (a, wa), (b, wb), (c, wc) in itertools.product(*corners))


def test_zero_field_is_bitwise_identity(rng):
    x = torch.from_numpy(rng.standard_normal((1, 2, 5, 6, 7)).astype(np.float32))
    assert torch.equal(grid_sample_trilinear(x, torch.zeros(1, 3, 5, 6, 7)), x)


def test_integer_shift_with_border_clamp():
    ramp = torch.arange(5.0).view(1, 1, 1, 1, 5).expand(1, 1, 3, 4, 5).contiguous()
    field = torch.zeros(1, 3, 3, 4, 5)
    field[:, 2] = 1.0
    out = grid_sample_trilinear(ramp, field)
    assert out[0, 0, 0, 0].tolist() == [1, 2, 3, 4, 4]


def test_matches_pointwise_oracle(rng):
    vol = rng.standard_normal((4, 5, 6))
    phi = rng.uniform(-2.5, 2.5, (3, 4, 5, 6))
    got = grid_sample_trilinear(torch.from_numpy(vol)[None, None], torch.from_numpy(phi)[None])[0, 0]
    ref = np.zeros_like(vol)
    for i in itertools.product(*(range(n) for n in vol.shape)):
        ref[i] = trilinear_point(vol, [i[a] + phi[(a,) + i] for a in range(3)])
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-12)


def test_gradients_wrt_input_and_field(rng):
    x = torch.from_numpy(rng.standard_normal((1, 1, 4, 4, 4)))
    # keep sample points off integer knots and inside the volume
    phi = torch.from_numpy(rng.uniform(0.2, 0.4, (1, 3, 4, 4, 4))) * torch.tensor([1.0, -1.0, 1.0]).view(1, 3, 1, 1, 1)
    phi[:, :, -1] = -0.3
    phi[:, :, :, -1] = -0.3
    phi[:, :, :, :, -1] = -0.3
    w = torch.from_numpy(rng.standard_normal((1, 1, 4, 4, 4)))
    err = grad_check(lambda a, f: (grid_sample_trilinear(a, f) * w).sum(), [x, phi], eps=1e-6)
    assert err <= 1e-4


def test_field_gradient_vanishes_when_clamped():
    x = torch.arange(4.0, dtype=torch.float64).view(1, 1, 1, 1, 4).expand(1, 1, 2, 2, 4).contiguous()
    phi = torch.zeros(1, 3, 2, 2, 4, dtype=torch.float64)
    phi[:, 2] = 10.0
    phi.requires_grad_(True)
    (g,) = torch.autograd.grad(grid_sample_trilinear(x, phi).sum(), phi)
    assert torch.count_nonzero(g) == 0


def test_shape_errors():
    with pytest.raises(ShapeError):
        grid_sample_trilinear(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 2, 4, 4, 4))
    with pytest.raises(ShapeError):
        grid_sample_trilinear(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 3, 4, 4, 5))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4, 4, 4), elements=st.floats(-6, 6)),
       arrays(np.float64, (1, 4, 4, 4), elements=st.floats(-100, 100)))
def test_output_within_input_range(phi, vol):
    out = grid_sample_trilinear(torch.from_numpy(vol)[None], torch.from_numpy(phi)[None])
    assert out.min() >= vol.min() - 1e-9 and out.max() <= vol.max() + 1e-9


def _labels(rng, C=3, dims=(5, 6, 7)):
    return LabelMap(rng.integers(0, C, dims).astype(np.uint8), C)


def test_soft_warp_is_a_distribution(rng):
    labels = _labels(rng)
    phi = torch.from_numpy(rng.uniform(-3, 3, (1, 3) + labels.dims).astype(np.float32))
    soft = warp_labels(labels, phi, "soft")
    assert soft.shape == (1, 3) + labels.dims
    assert (soft.sum(1) - 1).abs().max() <= 1e-6
    assert soft.min() >= 0


def test_soft_zero_field_is_one_hot(rng):
    labels = _labels(rng)
    assert torch.equal(warp_labels(labels, torch.zeros((1, 3) + labels.dims), "soft"), one_hot(labels))


def test_nearest_matches_rounding_oracle(rng):
    labels = _labels(rng)
    phi = rng.uniform(-3, 3, (3,) + labels.dims)
    out = warp_labels(labels, torch.from_numpy(phi)[None], "nearest")
    ref = np.zeros_like(labels.data)
    for i in itertools.product(*(range(n) for n in labels.dims)):
        j = tuple(int(np.clip(math.floor(i[a] + phi[(a,) + i] + 0.5), 0, labels.dims[a] - 1)) for a in range(3))
        ref[i] = labels.data[j]
    assert np.array_equal(out.data, ref)
    assert out.num_classes == 3


def test_nearest_zero_field_identity(rng):
    labels = _labels(rng)
    out = warp_labels(labels, torch.zeros((1, 3) + labels.dims), "nearest")
    assert np.array_equal(out.data, labels.data)


def test_unknown_mode(rng):
    labels = _labels(rng)
    with pytest.raises(ValueError):
        warp_labels(labels, torch.zeros((1, 3) + labels.dims), "cubic")


def test_field_gradient_constant_and_ramp():
    const = torch.full((1, 3, 4, 4, 4), 0.7)
    assert torch.count_nonzero(field_gradient(const)) == 0
    ramp = torch.zeros(1, 3, 4, 4, 4)
    ramp[:, 2] = torch.arange(4.0).view(1, 1, 4)
    g = field_gradient(ramp)
    assert g.shape == (1, 3, 3, 4, 4, 4)
    assert g[0, 2, 2, :, :, :3].eq(1).all() and g[0, 2, 2, :, :, 3].eq(0).all()
    assert torch.count_nonzero(g[0, :, :2]) == 0 and torch.count_nonzero(g[0, :2]) == 0


def test_field_gradient_loop_oracle(rng):
    phi = rng.standard_normal((3, 3, 4, 5))
    got = field_gradient(torch.from_numpy(phi)[None])[0].numpy()
    ref = np.zeros((3, 3, 3, 4, 5))
    for c, a in itertools.product(range(3), range(3)):
        for i in itertools.product(range(3), range(4), range(5)):
            j = list(i)
            j[a] += 1
            if j[a] < phi.shape[1 + a]:
                ref[(c, a) + i] = phi[(c,) + tuple(j)] - phi[(c,) + i]
    np.testing.assert_array_equal(got, ref)
