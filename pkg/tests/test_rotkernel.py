import numpy as np
import pytest

from roteqnet.rotkernel import (
    align_gradients,
    circular_mask,
    orientation_angles,
    rotate_filter,
    rotate_filter_adjoint,
    rotated_bank,
    rotconv_backward,
    rotconv_forward,
)
from roteqnet.tensor import ShapeError, conv2d_backward, conv2d_ref, rotate_image


def mask_oracle(m):
    c = (m - 1) / 2
    r, q = np.mgrid[:m, :m]
    return (r - c) ** 2 + (q - c) ** 2 <= (m / 2) ** 2


@pytest.mark.parametrize("m, count", [(1, 1), (3, 9), (7, 37)])
def test_mask_counts(m, count):
    mask = circular_mask(m)
    assert mask.sum() == count
    np.testing.assert_array_equal(mask, mask_oracle(m))


def test_mask_seven_excludes_corner_rings():
    mask = circular_mask(7)
    for dr, dc in [(3, 3), (2, 3), (3, 2)]:
        for sr in (-1, 1):
            for sc in (-1, 1):
                assert not mask[3 + sr * dr, 3 + sc * dc]


def test_mask_rejects_even():
    with pytest.raises(ValueError):
        circular_mask(4)


def test_orientation_angles():
    a = orientation_angles(8)
    np.testing.assert_array_equal(a, np.arange(8) * 45.0)
    assert np.all(np.diff(a) > 0) and a[-1] < 360


def test_rotate_filter_zero_is_masked_identity():
    w = np.random.default_rng(0).normal(size=(2, 3, 7, 7))
    np.testing.assert_array_equal(rotate_filter(w, 0), w * circular_mask(7))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotate_filter_right_angles_are_permutations(k):
    w = np.random.default_rng(1).normal(size=(1, 1, 7, 7)) * circular_mask(7)
    np.testing.assert_array_equal(rotate_filter(w, 90 * k), np.rot90(w, k, axes=(-2, -1)))
    np.testing.assert_array_equal(rotate_filter(w, 90 * k), rotate_image(w, 90 * k))


def _bump(sigma, m=7):
    r, c = np.mgrid[:m, :m] - (m - 1) / 2
    return (np.exp(-(r**2 + c**2) / (2 * sigma**2)) * circular_mask(m))[None, None]


def _interior(m=7, radius=2.0):
    r, c = np.mgrid[:m, :m] - (m - 1) / 2
    return r**2 + c**2 <= radius**2


def test_rotate_30_round_trip_on_wide_bump():
    w = _bump(1000.0)
    back = rotate_filter(rotate_filter(w, 30), -30)
    assert np.abs(back - w)[..., _interior()].max() < 1e-6


def test_rotate_30_round_trip_exact_for_affine_filter():
    r, c = np.mgrid[:7, :7] - 3.0
    w = ((0.3 * r - 0.7 * c + 2.0) * circular_mask(7))[None, None]
    back = rotate_filter(rotate_filter(w, 30), -30)
    assert np.abs(back - w)[..., _interior()].max() < 1e-12


def test_rotate_round_trip_error_shrinks_with_curvature():
    errs = [np.abs(rotate_filter(rotate_filter(_bump(s), 30), -30) - _bump(s))[..., _interior()].max() for s in (10, 20, 40)]
    assert errs[0] > errs[1] > errs[2]
    # bilinear error scales with the second derivative, i.e. 1 / sigma**2
    assert 3.0 < errs[0] / errs[1] < 5.0 and 3.0 < errs[1] / errs[2] < 5.0


def test_rotate_filter_adjoint():
    rng = np.random.default_rng(2)
    w, g = rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(2, 2, 7, 7))
    for angle in (0, 22.5, 90, 200):
        lhs = (rotate_filter(w, angle) * g).sum()
        rhs = (w * rotate_filter_adjoint(g, angle)).sum()
        assert abs(lhs - rhs) < 1e-10


def test_rotated_bank_layout():
    w = np.random.default_rng(3).normal(size=(2, 3, 5, 5))
    bank = rotated_bank(w, 4)
    assert bank.shape == (2, 4, 3, 5, 5)
    for r in range(4):
        np.testing.assert_array_equal(bank[:, r], rotate_filter(w, 90 * r))


def test_rotconv_r1_is_plain_conv():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    y = rotconv_forward(x, w, b, 1)
    assert y.shape == (2, 4, 1, 8, 8)
    np.testing.assert_allclose(y[:, :, 0], conv2d_ref(x, w * circular_mask(3), b), atol=1e-12)


def test_rotconv_slices_match_rotated_filter_convs():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(1, 2, 10, 10)), rng.normal(size=(3, 2, 7, 7)), rng.normal(size=3)
    y = rotconv_forward(x, w, b, 8)
    for r in range(8):
        np.testing.assert_allclose(y[:, :, r], conv2d_ref(x, rotate_filter(w, 45 * r), b), atol=1e-10)


def test_rotconv_filter_pattern_response():
    w = np.random.default_rng(6).normal(size=(1, 1, 7, 7)) * circular_mask(7)
    x = np.zeros((1, 1, 21, 21))
    x[0, 0, 7:14, 7:14] = w[0, 0]
    y = rotconv_forward(x, w, np.zeros(1), 8)
    assert y[0, 0, :, 10, 10].argmax() == 0
    yr = rotconv_forward(rotate_image(x, 90), w, np.zeros(1), 8)
    assert yr[0, 0, :, 10, 10].argmax() == 2


def test_rotconv_constant_input_zero_mean_filter():
    w = np.random.default_rng(7).normal(size=(1, 1, 7, 7)) * circular_mask(7)
    w -= w.sum() / circular_mask(7).sum() * circular_mask(7)
    y = rotconv_forward(np.ones((1, 1, 20, 20)), w, np.array([0.3]), 4)
    np.testing.assert_allclose(y[..., 3:-3, 3:-3], 0.3, atol=1e-12)
    # grid-aligned slices of a finer stack are exact as well
    y8 = rotconv_forward(np.ones((1, 1, 20, 20)), w, np.array([0.3]), 8)
    np.testing.assert_allclose(y8[:, :, ::2, 3:-3, 3:-3], 0.3, atol=1e-12)


def test_rotconv_shape_errors():
    with pytest.raises(ShapeError):
        rotconv_forward(np.zeros((1, 2, 8, 8)), np.zeros((1, 3, 3, 3)), np.zeros(1), 4)
    with pytest.raises(ShapeError):
        rotconv_forward(np.zeros((1, 3, 8, 8)), np.zeros((2, 3, 3, 3)), np.zeros(1), 4)


def test_rotconv_backward_zero_grad():
    rng = np.random.default_rng(8)
    x, w = rng.normal(size=(1, 1, 8, 8)), rng.normal(size=(1, 1, 3, 3))
    gx, gw, gb = rotconv_backward(x, w, 4, np.zeros((1, 1, 4, 8, 8)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_rotconv_backward_r1_matches_conv_backward():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(2, 3, 1, 6, 6))
    gx, gw, gb = rotconv_backward(x, w, 1, g)
    ex, ew, eb = conv2d_backward(x, w * circular_mask(3), g[:, :, 0], None)
    np.testing.assert_allclose(gx, ex, atol=1e-12)
    np.testing.assert_allclose(gw, ew * circular_mask(3), atol=1e-12)
    np.testing.assert_allclose(gb, eb, atol=1e-12)


def test_rotconv_backward_dim_mismatch():
    with pytest.raises(ShapeError):
        rotconv_backward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 3, 3)), 4, np.zeros((1, 1, 3, 8, 8)))


def test_literal_alignment_agrees_on_right_angles():
    # at multiples of 90 degrees the rotation is a permutation, so its inverse is its transpose
    g = np.random.default_rng(10).normal(size=(2, 4, 1, 5, 5)) * circular_mask(5)
    np.testing.assert_allclose(align_gradients(g, 4), align_gradients(g, 4, literal=True), atol=1e-12)
