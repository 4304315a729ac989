import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coinsplat.camera import Camera, RigidTransform
from coinsplat.gaussians import GaussianScene, covariance
from coinsplat.render import (
    Rasterizer,
    project_gaussian,
    project_gaussians,
    render,
    render_backward,
    render_benchmark,
)

from conftest import front_camera, random_rotation, random_scene
from oracles import fd_check, naive_render, support_signature


def one_gaussian(mean=(0, 0, 0), log_scale=(-1.5, -1.5, -1.5), logit=0.0, color=(0.8, 0.3, 0.1), quat=(1, 0, 0, 0)):
    return GaussianScene(np.array([mean], float), np.array([quat], float), np.array([log_scale], float),
                         np.array([logit], float), np.array([color], float))


# projection


def test_behind_camera_is_culled():
    cam = front_camera()
    assert project_gaussian(one_gaussian(mean=(0, 0, -4)), cam) is None
    assert project_gaussian(one_gaussian(mean=(0, 0, -2.995)), cam) is None  # z = 0.005 < near plane


def test_projection_matches_independent_jacobian(rng):
    cam = front_camera(32)
    for _ in range(20):
        g = random_scene(rng, 1)
        mean2, cov2, depth = project_gaussian(g, cam)
        p = cam.R @ g.means[0] + cam.t
        J = np.array([[cam.fx / p[2], 0, -cam.fx * p[0] / p[2] ** 2], [0, cam.fy / p[2], -cam.fy * p[1] / p[2] ** 2]])
        Sigma = covariance(g.quats, g.log_scales)[0]
        np.testing.assert_allclose(cov2, J @ cam.R @ Sigma @ cam.R.T @ J.T + 0.3 * np.eye(2), rtol=1e-12)
        np.testing.assert_allclose(mean2, [cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
        assert depth == pytest.approx(p[2])


def test_projected_covariance_monte_carlo():
    """Sample the 3D Gaussian, push samples through the exact projection, compare the spread.

    The EWA splat uses the Jacobian at the mean, so a small Gaussian far from
    the camera agrees with the sampled covariance up to sampling error.
    """
    rng = np.random.default_rng(7)
    cam = front_camera(64, distance=4.0)
    g = one_gaussian(mean=(0.2, -0.1, 0.3), log_scale=(-2.5, -3.0, -2.2), quat=(0.9, 0.2, -0.3, 0.1))
    _, cov2, _ = project_gaussian(g, cam)
    L = np.linalg.cholesky(covariance(g.quats, g.log_scales)[0])
    X = g.means[0] + rng.normal(size=(400_000, 3)) @ L.T
    pc = X @ cam.R.T + cam.t
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2], cam.fy * pc[:, 1] / pc[:, 2]], axis=1)
    sample_cov = np.cov(uv.T) + 0.3 * np.eye(2)
    np.testing.assert_allclose(cov2, sample_cov, rtol=0.03)


def test_projection_stats_counts():
    cam = front_camera()
    means = np.array([[0, 0, 0], [0, 0, -5.0], [30.0, 0, 0]])
    scene = GaussianScene(means, np.tile([1.0, 0, 0, 0], (3, 1)), np.full((3, 3), -1.5), np.zeros(3), np.full((3, 3), 0.5))
    p = project_gaussians(scene, cam)
    assert p.visible.tolist() == [True, False, False]
    assert p.n_culled == 2 and p.n_skipped == 0
    out = render(scene, cam)
    assert out.stats.n_culled == 2 and out.stats.n_gaussians == 3


# forward against the naive oracle


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 25)
    cam = front_camera(24 if seed % 2 else 20)
    bg = rng.random(3)
    out = render(scene, cam, bg)
    color, depth, alpha, T = naive_render(scene, cam, bg)
    np.testing.assert_allclose(out.color, color, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-12)
    np.testing.assert_allclose(out.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(out.final_T, T, atol=1e-12)


def test_forward_matches_oracle_across_tiles():
    rng = np.random.default_rng(11)
    scene = random_scene(rng, 60, spread=0.9)
    cam = front_camera(40)
    out = render(scene, cam)
    color, depth, _, _ = naive_render(scene, cam)
    np.testing.assert_allclose(out.color, color, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-12)


def test_single_gaussian_center_value():
    cam = front_camera(17)
    g = one_gaussian(color=(0.2, 0.4, 0.6), logit=1.0)
    out = render(g, cam)
    a = 1 / (1 + np.exp(-1.0))
    np.testing.assert_allclose(out.color[8, 8], a * np.array([0.2, 0.4, 0.6]), atol=1e-12)
    assert out.depth[8, 8] == pytest.approx(3.0)


def test_colors_clamped_at_input():
    cam = front_camera(17)
    hot = render(one_gaussian(color=(1.7, -0.4, 0.5)), cam).color
    ok = render(one_gaussian(color=(1.0, 0.0, 0.5)), cam).color
    np.testing.assert_array_equal(hot, ok)


def test_empty_scene_is_background():
    cam = front_camera(20)
    out = render(GaussianScene.empty(), cam, (0.1, 0.2, 0.3))
    assert (out.color == np.array([0.1, 0.2, 0.3])).all()
    assert (out.alpha == 0).all() and (out.depth == 0).all()


# invariants


@pytest.mark.parametrize("seed", range(10))
def test_alpha_plus_transmittance_is_one(seed):
    rng = np.random.default_rng(100 + seed)
    out = render(random_scene(rng, 30, opacity=(0, 6)), front_camera(32))
    np.testing.assert_allclose(out.alpha + out.final_T, 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_storage_order_does_not_matter(seed):
    rng = np.random.default_rng(200 + seed)
    scene = random_scene(rng, 40)
    cam = front_camera(32)
    perm = rng.permutation(len(scene))
    a, b = render(scene, cam), render(scene.subset(perm), cam)
    assert np.abs(a.color - b.color).max() <= 1e-6
    assert np.abs(a.depth - b.depth).max() <= 1e-6


def test_background_passthrough():
    cam = front_camera(32)
    bg = (0.3, 0.6, 0.9)
    out = render(one_gaussian(mean=(0.5, 0.5, 0)), cam, bg)
    untouched = out.alpha == 0
    assert untouched.sum() > 500
    assert (out.color[untouched] == np.array(bg)).all()


def test_transmittance_cutoff_stops_compositing():
    cam = front_camera(9)
    means = np.array([[0, 0, z] for z in np.linspace(0, 1, 8)])
    scene = GaussianScene(means, np.tile([1.0, 0, 0, 0], (8, 1)), np.full((8, 3), -0.5), np.full(8, 8.0),
                          np.tile([0.9, 0.1, 0.1], (8, 1)))
    scene.colors[2:] = [0.0, 0.0, 1.0]
    out = render(scene, cam)
    # two near-opaque layers push T below 1e-4, so the blue ones never show
    a = 1 / (1 + np.exp(-8.0))
    expected = np.array([0.9, 0.1, 0.1]) * (a + a * (1 - a))
    np.testing.assert_allclose(out.color[4, 4], expected, rtol=0, atol=1e-15)
    assert out.final_T[4, 4] == pytest.approx((1 - a) ** 2, rel=1e-12)
    assert out._state[-1][4, 4] == 2


def test_rigid_invariance(rng):
    cam = front_camera(24)
    scene = random_scene(rng, 30)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    a = render(scene, cam).color
    b = render(scene.transformed(T), cam.with_pose(cam.pose.compose(T.inverse()))).color
    assert np.abs(a - b).max() <= 1e-4


def test_multithread_bit_identical():
    from coinsplat.render import set_threads

    rng = np.random.default_rng(3)
    scene = random_scene(rng, 200, spread=1.0)
    cam = front_camera(64)
    up = rng.normal(size=(64, 64, 3))
    set_threads(1)
    a = render(scene, cam)
    ga = render_backward(scene, cam, up, a)
    set_threads(None)
    b = render(scene, cam)
    gb = render_backward(scene, cam, up, b)
    assert np.array_equal(a.color, b.color)
    for x, y in zip(ga.arrays(), gb.arrays()):
        assert np.array_equal(x, y)


# gradients


def _param_closure(scene, name, cam, up):
    def build(x):
        s = scene.copy()
        setattr(s, name, x.copy())
        return s

    def f(x):
        return float(np.sum(up * render(build(x), cam).color))

    return f, build


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", ["means", "quats", "log_scales", "logit_opacities", "colors"])
def test_render_gradients_match_finite_differences(seed, name):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 8)
    cam = front_camera(16)
    up = rng.normal(size=(16, 16, 3))
    grads = render_backward(scene, cam, up)
    f, build = _param_closure(scene, name, cam, up)
    fails = fd_check(f, getattr(scene, name), getattr(grads, name), h=1e-4, rtol=1e-3, atol=1e-6,
                     signature=support_signature(build, cam))
    assert not fails, fails[:5]


def test_out_of_range_color_gradient_is_zero():
    cam = front_camera(17)
    g = one_gaussian(color=(1.5, 0.5, -0.2))
    grads = render_backward(g, cam, np.ones((17, 17, 3)))
    assert grads.colors[0, 0] == 0.0 and grads.colors[0, 2] == 0.0 and grads.colors[0, 1] > 0


def test_backward_reuses_forward_state(rng):
    scene = random_scene(rng, 10)
    cam = front_camera(16)
    up = rng.normal(size=(16, 16, 3))
    out = render(scene, cam)
    a = render_backward(scene, cam, up, out)
    b = render_backward(scene, cam, up)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_color_gradient_is_compositing_weight(seed):
    """Rendering is linear in colour, so d(pixel)/d(colour) equals the blend weight."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 6)
    cam = front_camera(16)
    r = Rasterizer.prepare(scene, cam)
    up = rng.normal(size=(16, 16, 3))
    grads = render_backward(scene, cam, up)
    for i in range(len(scene)):
        basis = np.zeros_like(scene.colors)
        basis[i] = 1.0
        img = r.forward(basis).color
        np.testing.assert_allclose(grads.colors[i], np.sum(up * img, axis=(0, 1)), atol=1e-10)


def test_benchmark_report():
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 300, spread=1.0)
    rep = render_benchmark(scene, front_camera(64), repeats=3)
    assert rep["deterministic"] and rep["repeats"] == 3
    assert set(rep["stage_ms"]) == {"project", "bin", "rasterize"}
    assert rep["fps"] == pytest.approx(1e3 / rep["ms_per_frame"])
