"""Synthetic multi-view scenes with controlled per-view inconsistencies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, orbit_cameras
from .dataset import ViewDataset
from .gaussians import GaussianScene, MeshFrames, ParametricMesh, TriangleBinding, icosphere, init_on_mesh, realize
from .render import render
from .warp import bilinear_sample

SPHERE_RADIUS = 0.6
ORBIT_RADIUS = 2.6
FOV_DEG = 40.0


@dataclass
class SyntheticScene:
    scene: GaussianScene
    mesh: ParametricMesh
    binding: TriangleBinding


def _blendshape_basis(verts: np.ndarray, rng: np.random.Generator, count: int = 4) -> np.ndarray:
    """Smooth radial bumps centred on random directions."""
    dirs = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    centers = rng.normal(size=(count, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    basis = []
    for c in centers:
        w = np.exp(-np.sum((dirs - c) ** 2, axis=1) / 0.25)
        basis.append(0.15 * w[:, None] * dirs)
    return np.asarray(basis)


def procedural_colors(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stripes, a smooth hue field and a few dark spots, as a function of direction."""
    d = points / np.maximum(np.linalg.norm(points, axis=1, keepdims=True), 1e-12)
    lon = np.arctan2(d[:, 0], -d[:, 2])
    lat = np.arcsin(np.clip(d[:, 1], -1.0, 1.0))
    ph = rng.uniform(0, 2 * np.pi, 6)
    r = 0.55 + 0.3 * np.sin(3 * lon + ph[0]) * np.cos(2 * lat + ph[1])
    g = 0.5 + 0.3 * np.sin(5 * lat + ph[2])
    b = 0.5 + 0.3 * np.cos(2 * lon - 3 * lat + ph[3])
    stripes = 0.15 * np.sign(np.sin(8 * lon + ph[4]))
    col = np.stack([r + stripes, g, b - stripes], axis=1)
    for c in rng.normal(size=(4, 3)):
        c /= np.linalg.norm(c)
        spot = np.exp(-np.sum((d - c) ** 2, axis=1) / 0.02)
        col *= 1.0 - 0.7 * spot[:, None]
    return np.clip(col, 0.0, 1.0)


def make_scene(seed: int = 0, n_gaussians: int = 1280) -> SyntheticScene:
    """Deterministic textured Gaussians bound to a bumpy sphere inside the unit ball."""
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    rng = np.random.default_rng(seed)
    sub = 0
    while 20 * 4**sub < n_gaussians and sub < 4:
        sub += 1
    verts, faces = icosphere(sub, SPHERE_RADIUS)
    basis = _blendshape_basis(verts, rng)
    mesh = ParametricMesh(verts, faces, basis, rng.uniform(0.0, 1.0, len(basis)))
    per_face = max(1, math.ceil(n_gaussians / len(faces)))
    binding = init_on_mesh(mesh, per_face, rng_seed=int(rng.integers(2**31)))
    if len(binding) > n_gaussians:
        binding = binding.subset(np.sort(rng.choice(len(binding), n_gaussians, replace=False)))
    n = len(binding)
    binding.relative_log_scale += np.log(1.0 / math.sqrt(per_face)) + rng.normal(0.0, 0.1, (n, 3))
    binding.relative_log_scale[:, 1] -= 0.7  # thinner along the surface normal
    frames = MeshFrames.of(mesh)
    canonical = realize(binding, frames, np.zeros(n), np.zeros((n, 3))).means
    colors = procedural_colors(canonical, rng)
    opac = np.full(n, 3.0)
    scene = realize(binding, frames, opac, colors)
    return SyntheticScene(scene, mesh, binding)


def default_intrinsics(size: int) -> Intrinsics:
    return Intrinsics.from_fov(size, size, FOV_DEG)


def render_views(scene: GaussianScene, n_views: int = 24, size: int = 64, radius: float = ORBIT_RADIUS,
                 background=(0.0, 0.0, 0.0), start_deg: float = 0.0) -> ViewDataset:
    """Render clean images and expected-depth maps on a horizontal orbit; view 0 is the reference."""
    if n_views < 2:
        raise ValueError("need at least two views")
    cams = orbit_cameras(n_views, radius, intrinsics=default_intrinsics(size), start_deg=start_deg)
    images, depths = [], []
    for cam in cams:
        out = render(scene, cam, background)
        images.append(np.clip(out.color, 0.0, 1.0))
        depths.append(out.depth)
    return ViewDataset(cams, images, depths, reference_view=0)


# --------------------------------------------------------------------------
# inconsistencies


@dataclass
class InconsistencySpec:
    """Per-view perturbation ranges.

    ``color_sigma`` draws gains in [1 - s, 1 + s] and biases in [-s, s] per
    channel; ``gain_range``/``bias_range`` override that with explicit
    (low, high) bounds, scalar or per channel. Blobs are compact smooth bumps
    of radius ``blob_radius`` px and per-channel amplitude of magnitude in
    ``blob_amplitude`` with random sign. ``jitter`` bounds a smooth dense
    displacement field in pixels.
    """

    color_sigma: float = 0.0
    gain_range: tuple | None = None
    bias_range: tuple | None = None
    blob_count: int = 0
    blob_radius: tuple = (4.0, 10.0)
    blob_amplitude: tuple = (0.1, 0.3)
    jitter: float = 0.0
    jitter_modes: int = 3
    seed: int = 0
    keep_reference_clean: bool = True

    def __post_init__(self):
        if self.color_sigma < 0 or self.jitter < 0 or self.blob_count < 0:
            raise ValueError("color_sigma, jitter and blob_count must be >= 0")
        lo, hi = self.blob_amplitude
        if not (0 <= lo <= hi <= 1):
            raise ValueError("blob amplitudes must satisfy 0 <= low <= high <= 1")
        if not (0 < self.blob_radius[0] <= self.blob_radius[1]):
            raise ValueError("blob radius range must be positive and ordered")

    def _range(self, explicit, default):
        r = default if explicit is None else explicit
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=np.float64), (3,)) for v in r)
        return lo, hi


@dataclass
class SyntheticBundle:
    clean: ViewDataset
    perturbed: ViewDataset
    records: list = field(default_factory=list)


def sample_perturbation(spec: InconsistencySpec, view: int, width: int, height: int) -> dict:
    rng = np.random.default_rng([spec.seed, view])
    glo, ghi = spec._range(spec.gain_range, (1.0 - spec.color_sigma, 1.0 + spec.color_sigma))
    blo, bhi = spec._range(spec.bias_range, (-spec.color_sigma, spec.color_sigma))
    gain = glo + (ghi - glo) * rng.random(3)
    bias = blo + (bhi - blo) * rng.random(3)
    blobs = []
    for _ in range(spec.blob_count):
        amp = rng.uniform(*spec.blob_amplitude, 3) * rng.choice([-1.0, 1.0], 3)
        blobs.append({
            "center": [float(rng.uniform(0, width - 1)), float(rng.uniform(0, height - 1))],
            "radius": float(rng.uniform(*spec.blob_radius)),
            "amplitude": [float(a) for a in amp],
        })
    jitter = None
    if spec.jitter > 0:
        m = spec.jitter_modes
        freq = rng.uniform(0.02, 0.12, (m, 2, 2)) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi, (m, 2))
        amp = rng.random((m, 2))
        # |d| <= sqrt(dx^2 + dy^2) <= jitter when each axis sums to jitter / sqrt(2)
        amp *= spec.jitter / math.sqrt(2) / amp.sum(axis=0, keepdims=True)
        jitter = {"frequency": freq.tolist(), "phase": phase.tolist(), "amplitude": amp.tolist()}
    return {"view": int(view), "gain": gain.tolist(), "bias": bias.tolist(), "blobs": blobs, "jitter": jitter}


def identity_record(view: int) -> dict:
    return {"view": int(view), "gain": [1.0, 1.0, 1.0], "bias": [0.0, 0.0, 0.0], "blobs": [], "jitter": None}


def jitter_field(record_jitter: dict, width: int, height: int) -> np.ndarray:
    """Displacement (H, W, 2) in pixels."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    freq = np.asarray(record_jitter["frequency"])
    phase = np.asarray(record_jitter["phase"])
    amp = np.asarray(record_jitter["amplitude"])
    disp = np.zeros((height, width, 2))
    for k in range(len(amp)):
        for axis in range(2):
            arg = freq[k, axis, 0] * xx + freq[k, axis, 1] * yy + phase[k, axis]
            disp[..., axis] += amp[k, axis] * np.sin(arg)
    return disp


def apply_perturbation(image, record: dict) -> np.ndarray:
    """Color affine, then additive blobs, then jitter resampling, then clamp."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    out = img * np.asarray(record["gain"]) + np.asarray(record["bias"])
    if record["blobs"]:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        for blob in record["blobs"]:
            r2 = ((xx - blob["center"][0]) ** 2 + (yy - blob["center"][1]) ** 2) / blob["radius"] ** 2
            inside = r2 < 1.0
            bump = np.where(inside, (1.0 - np.minimum(r2, 1.0)) ** 2, 0.0)
            out[inside] += bump[inside, None] * np.asarray(blob["amplitude"])
    if record["jitter"] is not None:
        disp = jitter_field(record["jitter"], w, h)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        out = bilinear_sample(out, xx + disp[..., 0], yy + disp[..., 1])
    return np.clip(out, 0.0, 1.0)


def inject(dataset: ViewDataset, spec: InconsistencySpec) -> SyntheticBundle:
    """Perturb every view (optionally sparing the reference); the input is not modified."""
    images, records = [], []
    for vid, cam, img in zip(dataset.view_ids, dataset.cameras, dataset.images):
        if spec.keep_reference_clean and vid == dataset.reference_view:
            rec = identity_record(vid)
        else:
            rec = sample_perturbation(spec, vid, cam.width, cam.height)
        records.append(rec)
        images.append(apply_perturbation(img, rec))
    perturbed = ViewDataset(list(dataset.cameras), images,
                            None if dataset.depths is None else [np.array(d) for d in dataset.depths],
                            dataset.reference_view, list(dataset.view_ids))
    return SyntheticBundle(dataset, perturbed, records)
