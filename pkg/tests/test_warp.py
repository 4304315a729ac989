import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coinsplat.camera import Camera, Intrinsics, look_at
from coinsplat.warp import DepthImage, VisibilityMask, blend, soften_mask, warp

from oracles import warp_oracle


def plane_depth(cam, planes):
    """Camera-z depth of the nearest of several planes (n, d) with n.x = d; inf where none is hit."""
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    rays_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    rays = rays_cam @ cam.R  # world directions per unit camera z
    center = cam.center
    best = np.full((H, W), np.inf)
    for n, d, box in planes:
        n = np.asarray(n, float)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (d - center @ n) / denom
        hit = center + z[..., None] * rays
        inside = np.all((hit >= box[0] - 1e-12) & (hit <= box[1] + 1e-12), axis=-1)
        ok = (z > 0) & inside & np.isfinite(z)
        best = np.where(ok & (z < best), z, best)
    return best


TWO_PLANES = [
    # back wall z = 1 spanning everything, small front card z = -0.3 covering the middle
    ((0, 0, 1), 1.0, (np.array([-5, -5, 0.99]), np.array([5, 5, 1.01]))),
    ((0, 0, 1), -0.3, (np.array([-0.35, -0.25, -0.31]), np.array([0.3, 0.35, -0.29]))),
]


def camera_at(eye, size=64, fov=50.0):
    intr = Intrinsics.from_fov(size, size, fov)
    return Camera(intr.fx, intr.fy, intr.cx, intr.cy, size, size, look_at(eye, (0.0, 0.0, 0.5)))


@pytest.mark.parametrize("eye", [(0.4, 0.0, -2.5), (-0.5, 0.3, -2.2), (0.0, -0.6, -2.8), (0.9, 0.2, -2.0)])
def test_two_plane_warp_matches_oracle(eye):
    rng = np.random.default_rng(int(1000 * abs(eye[0]) + 10 * abs(eye[1])))
    anchor = camera_at((0.0, 0.0, -2.5))
    target = camera_at(eye)
    da, dt = plane_depth(anchor, TWO_PLANES), plane_depth(target, TWO_PLANES)
    img = rng.random((64, 64, 3))
    warped, mask = warp(img, da, anchor, target, dt, tol=0.01)
    ref_img, ref_mask = warp_oracle(img, da, anchor, target, dt, 0.01)
    assert np.array_equal(mask.weights, ref_mask)
    assert np.abs(warped - ref_img).max() <= 1e-6
    # disocclusion behind the card exists in every off-axis view
    assert 0 < (mask.weights == 0).sum() < 64 * 64


def test_identity_warp_reproduces_source(rng):
    cam = camera_at((0.2, -0.1, -2.0))
    depth = plane_depth(cam, TWO_PLANES)
    img = rng.random((64, 64, 3))
    warped, mask = warp(img, depth, cam, cam, depth)
    assert (mask.weights == 1).all()
    assert np.array_equal(warped, img)


def test_occluded_pixels_are_black_and_masked():
    anchor = camera_at((0.0, 0.0, -2.5))
    target = camera_at((0.9, 0.2, -2.0))
    da, dt = plane_depth(anchor, TWO_PLANES), plane_depth(target, TWO_PLANES)
    warped, mask = warp(np.ones((64, 64, 3)), da, anchor, target, dt)
    hidden = mask.weights == 0
    assert (warped[hidden] == 0).all()
    np.testing.assert_allclose(warped[~hidden], 1.0, atol=1e-12)


def test_invalid_depth_is_invisible(rng):
    cam = camera_at((0.0, 0.0, -2.5))
    depth = plane_depth(cam, TWO_PLANES)
    depth[10:20, 10:20] = 0.0
    depth[30, 30] = np.nan
    _, mask = warp(rng.random((64, 64, 3)), depth, cam, cam, depth)
    assert (mask.weights[10:20, 10:20] == 0).all() and mask.weights[30, 30] == 0
    assert mask.weights.sum() == 64 * 64 - 101


def test_depth_image_validity():
    d = DepthImage(np.array([[1.0, 0.0], [np.inf, 2.0]]), np.array([[True, True], [True, False]]))
    assert d.validity.tolist() == [[True, False], [False, False]]


def test_shape_checks(rng):
    cam = camera_at((0, 0, -2.5), size=16)
    with pytest.raises(ValueError, match="anchor image"):
        warp(np.zeros((8, 8, 3)), np.ones((16, 16)), cam, cam, np.ones((16, 16)))
    with pytest.raises(ValueError, match="target depth"):
        warp(np.zeros((16, 16, 3)), np.ones((16, 16)), cam, cam, np.ones((8, 16)))
    with pytest.raises(ValueError, match="tol"):
        warp(np.zeros((16, 16, 3)), np.ones((16, 16)), cam, cam, np.ones((16, 16)), tol=0)


# soft boundary


def test_soften_values_are_exactly_three_levels(rng):
    m = np.ones((30, 30))
    m[10:18, 5:25] = 0
    m[0, 0] = 0
    out = soften_mask(VisibilityMask(m), 2).weights
    assert set(np.unique(out)) == {0.0, 0.1, 1.0}
    assert (out[m == 0] == 0).all()
    # Chebyshev band of 2 around the hole
    assert out[8, 15] == 0.1 and out[7, 15] == 1.0 and out[19, 3] == 0.1 and out[20, 2] == 1.0


def test_soften_keeps_image_border_interior():
    out = soften_mask(np.ones((12, 12)), 3).weights
    assert (out == 1).all()


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), band=st.integers(1, 3))
def test_soften_is_idempotent(seed, band):
    rng = np.random.default_rng(seed)
    m = (rng.random((20, 20)) > 0.2).astype(float)
    once = soften_mask(m, band)
    twice = soften_mask(once, band)
    assert np.array_equal(once.weights, twice.weights)


def test_soften_rejects_zero_band():
    with pytest.raises(ValueError):
        soften_mask(np.ones((4, 4)), 0)


def test_blend_copy_paste(rng):
    a, b = rng.random((2, 8, 8, 3))
    m = np.zeros((8, 8))
    m[2:5] = 1
    m[6] = 0.1
    out = blend(a, b, VisibilityMask(m))
    np.testing.assert_array_equal(out[2:5], a[2:5])
    np.testing.assert_array_equal(out[0], b[0])
    np.testing.assert_allclose(out[6], 0.1 * a[6] + 0.9 * b[6])
    with pytest.raises(ValueError):
        blend(a, b[:4], m)
