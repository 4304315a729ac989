import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from coinsplat.camera import Camera, Intrinsics, RigidTransform, look_at  # noqa: E402
from coinsplat.gaussians import GaussianScene  # noqa: E402


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng, scale=1.0):
    return RigidTransform(random_rotation(rng), rng.normal(scale=scale, size=3))


def random_scene(rng, n=10, spread=0.5, scale=(-2.6, -1.6), opacity=(-1.0, 2.0)):
    """Gaussians around the origin, sized to cover a few pixels at 16x16."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        rng.uniform(-spread, spread, (n, 3)),
        q,
        rng.uniform(*scale, (n, 3)),
        rng.uniform(*opacity, n),
        rng.uniform(0.05, 0.95, (n, 3)),
    )


def front_camera(size=16, distance=3.0, fov=40.0, eye=None):
    intr = Intrinsics.from_fov(size, size, fov)
    eye = (0.0, 0.0, -distance) if eye is None else eye
    return Camera(intr.fx, intr.fy, intr.cx, intr.cy, size, size, look_at(eye, (0.0, 0.0, 0.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


from hypothesis import settings as _hsettings  # noqa: E402

_hsettings.register_profile("repro", derandomize=True, deadline=None)
_hsettings.load_profile("repro")
