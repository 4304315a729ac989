import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from coinsplat.losses import (
    dssim_grad,
    get_structure_loss,
    l1,
    l1_grad,
    psnr,
    pyramid_l1,
    pyramid_l1_grad,
    register_structure_loss,
    ssim,
    ssim_grad,
)

from oracles import central_difference


def reference_ssim(a, b):
    # Gaussian-weighted, sample-covariance off, valid region only: the same
    # definition as Wang et al. with an 11x11 window of sigma 1.5
    return structural_similarity(a, b, channel_axis=-1, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, full=True)[1][5:-5, 5:-5].mean()


def test_ssim_self_is_exactly_one(rng):
    img = rng.random((32, 40, 3))
    assert ssim(img, img) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((24 + seed, 30, 3))
    b = np.clip(a + rng.normal(scale=0.05 + 0.02 * seed, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - reference_ssim(a, b)) <= 1e-6


def test_ssim_bounds_and_symmetry(rng):
    a, b = rng.random((2, 20, 20, 3))
    v = ssim(a, b)
    assert -1 <= v <= 1
    assert v == pytest.approx(ssim(b, a), abs=1e-15)
    assert ssim(a, 1 - a) < 0


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError, match="11x11"):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_ssim_gradient(rng):
    a, b = rng.random((2, 14, 13, 3))
    _, g = ssim_grad(a, b)
    np.testing.assert_allclose(g, central_difference(lambda x: ssim(x, b), a, 1e-5), rtol=1e-4, atol=1e-9)
    v, gd = dssim_grad(a, b)
    assert v == pytest.approx(1 - ssim(a, b))
    np.testing.assert_array_equal(gd, -g)


def test_l1_and_gradient(rng):
    a, b = rng.random((2, 5, 6, 3))
    v, g = l1_grad(a, b)
    assert v == pytest.approx(np.abs(a - b).mean()) == l1(a, b)
    np.testing.assert_allclose(g, central_difference(lambda x: l1(x, b), a, 1e-7), atol=1e-8)


def test_pyramid_gradient(rng):
    a, b = rng.random((2, 16, 12, 3))
    v, g = pyramid_l1_grad(a, b)
    assert v == pyramid_l1(a, b)
    np.testing.assert_allclose(g, central_difference(lambda x: pyramid_l1(x, b), a, 1e-7), atol=1e-8)


def test_pyramid_tolerates_subpatch_shuffles(rng):
    a = rng.random((16, 16, 3))
    b = a.reshape(4, 4, 4, 4, 3)[:, ::-1, :, ::-1].reshape(16, 16, 3)  # permute within 4x4 blocks
    assert pyramid_l1(a, b) < 0.5 * l1(a, b)


def test_structure_loss_registry():
    register_structure_loss("plain_l1", l1_grad)
    assert get_structure_loss("plain_l1") is l1_grad
    with pytest.raises(ValueError, match="available"):
        get_structure_loss("nope")


def test_psnr_capped_and_known_value():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.0, 0.5), seed=st.integers(0, 1000))
def test_ssim_decreases_with_noise(scale, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16, 3))
    noise = rng.normal(size=a.shape)
    assert ssim(a, a + scale * noise) >= ssim(a, a + (scale + 0.1) * noise) - 1e-12
