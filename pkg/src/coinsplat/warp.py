"""Depth-guided texture propagation between views.

Warping is backward: every target pixel is lifted with the target depth,
reprojected into the anchor view and bilinearly sampled there. A pixel is
visible when the reprojection lands in frame and the anchor depth agrees
with the reprojected depth within a relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import Camera, unproject_points

BOUNDARY_WEIGHT = 0.1
FRAME_MARGIN = 0.5
SNAP_EPS = 1e-9


@dataclass
class DepthImage:
    pixels: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool) & (self.pixels > 0) & np.isfinite(self.pixels)

    @classmethod
    def from_array(cls, depth) -> "DepthImage":
        d = np.asarray(depth, dtype=np.float64)
        return cls(d, np.isfinite(d) & (d > 0))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class VisibilityMask:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)


def _as_depth(d) -> DepthImage:
    return d if isinstance(d, DepthImage) else DepthImage.from_array(d)


def _bilinear_taps(u, v, width, height):
    """Edge-clamped tap indices and weights for sample positions u (x), v (y)."""
    u = np.clip(u, 0.0, width - 1)
    v = np.clip(v, 0.0, height - 1)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = u - x0
    fy = v - y0
    return (y0, x0, y1, x1), ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)


def bilinear_sample(image, u, v):
    """Sample (H, W[, C]) at float coordinates with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    (y0, x0, y1, x1), (w00, w01, w10, w11) = _bilinear_taps(u, v, w, h)
    if img.ndim == 3:
        w00, w01, w10, w11 = (a[..., None] for a in (w00, w01, w10, w11))
    return w00 * img[y0, x0] + w01 * img[y0, x1] + w10 * img[y1, x0] + w11 * img[y1, x1]


def _snap(x):
    r = np.round(x)
    return np.where(np.abs(x - r) < SNAP_EPS, r, x)


def warp(anchor_img, anchor_depth, anchor_cam: Camera, target_cam: Camera, target_depth, tol: float = 0.01):
    """Warp the anchor image into the target view.

    Returns ``(warped_img, VisibilityMask)``; invisible pixels are black with
    weight 0, visible ones weight 1.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    img = np.asarray(anchor_img, dtype=np.float64)
    a_depth = _as_depth(anchor_depth)
    t_depth = _as_depth(target_depth)
    if img.shape[:2] != (anchor_cam.height, anchor_cam.width):
        raise ValueError(f"anchor image {img.shape[:2]} does not match anchor camera {anchor_cam.shape}")
    if a_depth.shape != (anchor_cam.height, anchor_cam.width):
        raise ValueError(f"anchor depth {a_depth.shape} does not match anchor camera {anchor_cam.shape}")
    if t_depth.shape != (target_cam.height, target_cam.width):
        raise ValueError(f"target depth {t_depth.shape} does not match target camera {target_cam.shape}")

    H, W = target_cam.height, target_cam.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    valid = t_depth.validity
    d = np.where(valid, t_depth.pixels, 1.0)
    world = unproject_points(np.stack([uu, vv], axis=-1), d, target_cam)
    pc = anchor_cam.world_to_camera(world)
    z = pc[..., 2]
    front = z > 1e-8
    zs = np.where(front, z, 1.0)
    u = _snap(anchor_cam.fx * pc[..., 0] / zs + anchor_cam.cx)
    v = _snap(anchor_cam.fy * pc[..., 1] / zs + anchor_cam.cy)
    Wa, Ha = anchor_cam.width, anchor_cam.height
    in_frame = ((u >= -FRAME_MARGIN) & (u <= Wa - 1 + FRAME_MARGIN)
                & (v >= -FRAME_MARGIN) & (v <= Ha - 1 + FRAME_MARGIN))

    (y0, x0, y1, x1), (w00, w01, w10, w11) = _bilinear_taps(u, v, Wa, Ha)
    av = a_depth.validity
    ad = np.where(av, a_depth.pixels, 0.0)  # zero-weight taps must not leak NaN/inf
    # every tap carrying weight must hold a valid depth
    taps_valid = ((av[y0, x0] | (w00 == 0)) & (av[y0, x1] | (w01 == 0))
                  & (av[y1, x0] | (w10 == 0)) & (av[y1, x1] | (w11 == 0)))
    sampled = w00 * ad[y0, x0] + w01 * ad[y0, x1] + w10 * ad[y1, x0] + w11 * ad[y1, x1]
    visible = valid & front & in_frame & taps_valid & (np.abs(sampled - z) <= tol * z)

    colors = bilinear_sample(img, u, v)
    warped = np.where(visible[..., None] if img.ndim == 3 else visible, colors, 0.0)
    return warped, VisibilityMask(visible.astype(np.float64))


def soften_mask(mask, band: int = 1) -> VisibilityMask:
    """Give visible pixels within ``band`` (Chebyshev) of an invisible one weight 0.1.

    Anything with positive weight counts as visible, so softening a softened
    mask reproduces it.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    w = mask.weights if isinstance(mask, VisibilityMask) else np.asarray(mask, dtype=np.float64)
    region = w > 0
    interior = ndimage.binary_erosion(region, structure=np.ones((2 * band + 1, 2 * band + 1), bool),
                                      border_value=1)
    out = np.where(interior, 1.0, np.where(region, BOUNDARY_WEIGHT, 0.0))
    return VisibilityMask(out)


def blend(warped_img, base_img, mask) -> np.ndarray:
    """Mask copy-paste: mask * warped + (1 - mask) * base."""
    a = np.asarray(warped_img, dtype=np.float64)
    b = np.asarray(base_img, dtype=np.float64)
    m = mask.weights if isinstance(mask, VisibilityMask) else np.asarray(mask, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if m.shape != a.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {a.shape[:2]}")
    if a.ndim == 3:
        m = m[..., None]
    return m * a + (1.0 - m) * b
