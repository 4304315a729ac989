"""Tile-based differentiable Gaussian splatting on the CPU.

Forward: EWA projection of every Gaussian, one global stable depth sort per
view, 16x16 tile binning, then front-to-back compositing per pixel. A Gaussian
touches a pixel when the pixel lies inside its 3-sigma screen ellipse.
Compositing stops once transmittance drops below ``T_EPS``.

Backward: each tile writes gradients for its own (tile, Gaussian) entries;
entries are then summed per Gaussian in a fixed sequential order, so the
result does not depend on the thread count.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

# the bundled TBB is often too old and numba warns on every process; prefer OpenMP
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numba  # noqa: E402
from numba import njit, prange  # noqa: E402

from .camera import Camera
from .gaussians import GaussianScene, covariance, quat_to_rotmat, rotmat_grad_to_quat_grad, sigmoid

TILE = 16
NEAR = 0.01
COV_FLOOR = 0.3
T_EPS = 1e-4
CUTOFF_SQ = 9.0
DET_EPS = 1e-12
DEPTH_EPS = 1e-8


class GradientError(FloatingPointError):
    pass


def set_threads(n: int | None) -> int:
    """Cap the numba worker count; returns the count actually in effect."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


def default_threads() -> int | None:
    env = os.environ.get("COINSPLAT_THREADS")
    return int(env) if env else None


# --------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    """Screen-space state of every Gaussian for one camera."""

    cam: Camera
    points_cam: np.ndarray  # (N, 3)
    means2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conics: np.ndarray  # (N, 3) = (a, b, c) of the inverse covariance
    depths: np.ndarray  # (N,)
    jacobians: np.ndarray  # (N, 2, 3)
    cov_cam: np.ndarray  # (N, 3, 3) camera-frame 3D covariance
    rotations: np.ndarray  # (N, 3, 3) of each Gaussian
    tile_rect: np.ndarray  # (N, 4) tx0, tx1, ty0, ty1 inclusive
    visible: np.ndarray  # (N,) bool
    n_culled: int
    n_skipped: int
    order: np.ndarray = field(default=None)  # visible indices, front to back


def project_gaussians(scene: GaussianScene, cam: Camera) -> Projection:
    n = len(scene)
    R = cam.R
    pc = scene.means @ R.T + cam.t
    z = pc[:, 2]
    in_front = z > NEAR
    zs = np.where(in_front, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2

    Rg = quat_to_rotmat(scene.quats)
    cov3 = covariance(scene.quats, scene.log_scales)
    cov_cam = R @ cov3 @ R.T
    cov2 = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2[:, 0, 0] += COV_FLOOR
    cov2[:, 1, 1] += COV_FLOOR
    cov2[:, 0, 1] = cov2[:, 1, 0] = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    good_det = det >= DET_EPS
    safe_det = np.where(good_det, det, 1.0)
    conics = np.stack([cov2[:, 1, 1] / safe_det, -cov2[:, 0, 1] / safe_det, cov2[:, 0, 0] / safe_det], axis=1)

    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    rx = 3.0 * np.sqrt(np.maximum(cov2[:, 0, 0], 0.0))
    ry = 3.0 * np.sqrt(np.maximum(cov2[:, 1, 1], 0.0))
    px0 = np.maximum(np.ceil(means2d[:, 0] - rx), 0)
    px1 = np.minimum(np.floor(means2d[:, 0] + rx), cam.width - 1)
    py0 = np.maximum(np.ceil(means2d[:, 1] - ry), 0)
    py1 = np.minimum(np.floor(means2d[:, 1] + ry), cam.height - 1)
    on_screen = (px0 <= px1) & (py0 <= py1)

    visible = in_front & good_det & on_screen
    tile_rect = np.zeros((n, 4), dtype=np.int64)
    tile_rect[visible, 0] = px0[visible] // TILE
    tile_rect[visible, 1] = px1[visible] // TILE
    tile_rect[visible, 2] = py0[visible] // TILE
    tile_rect[visible, 3] = py1[visible] // TILE

    proj = Projection(
        cam=cam,
        points_cam=pc,
        means2d=means2d,
        cov2d=cov2,
        conics=conics,
        depths=z,
        jacobians=J,
        cov_cam=cov_cam,
        rotations=Rg,
        tile_rect=tile_rect,
        visible=visible,
        n_culled=int(np.count_nonzero(~in_front | (good_det & ~on_screen))),
        n_skipped=int(np.count_nonzero(in_front & ~good_det)),
    )
    idx = np.flatnonzero(visible)
    proj.order = idx[np.argsort(z[idx], kind="stable")]
    return proj


def project_gaussian(g: GaussianScene, cam: Camera):
    """Project a single Gaussian; returns (mean2d, cov2d, depth) or None if culled."""
    p = project_gaussians(g.subset(slice(0, 1)), cam)
    if not p.visible[0]:
        return None
    return p.means2d[0], p.cov2d[0], float(p.depths[0])


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _bin_tiles(order, tile_rect, n_tiles_x, n_tiles_y):
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        for ty in range(tile_rect[g, 2], tile_rect[g, 3] + 1):
            for tx in range(tile_rect[g, 0], tile_rect[g, 1] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    entries = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for g in order:
        for ty in range(tile_rect[g, 2], tile_rect[g, 3] + 1):
            for tx in range(tile_rect[g, 0], tile_rect[g, 1] + 1):
                t = ty * n_tiles_x + tx
                entries[fill[t]] = g
                fill[t] += 1
    return offsets, entries


@njit(parallel=True, cache=True)
def _rasterize_forward(offsets, entries, means2d, conics, opacities, colors, depths, background,
                       width, height, n_tiles_x):
    n_tiles = offsets.shape[0] - 1
    out_color = np.empty((height, width, 3))
    out_depth = np.empty((height, width))
    out_T = np.empty((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                T = 1.0
                r = 0.0
                gc = 0.0
                b = 0.0
                d = 0.0
                last = 0
                for e in range(start, stop):
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > 9.0:
                        continue
                    alpha = opacities[g] * np.exp(-0.5 * q)
                    w = alpha * T
                    r += colors[g, 0] * w
                    gc += colors[g, 1] * w
                    b += colors[g, 2] * w
                    d += depths[g] * w
                    T = T * (1.0 - alpha)
                    last = e - start + 1
                    if T < 1e-4:
                        break
                out_color[py, px, 0] = r + background[0] * T
                out_color[py, px, 1] = gc + background[1] * T
                out_color[py, px, 2] = b + background[2] * T
                acc = 1.0 - T
                out_depth[py, px] = d / max(acc, 1e-8) if acc > 0.0 else 0.0
                out_T[py, px] = T
                n_contrib[py, px] = last
    return out_color, out_depth, out_T, n_contrib


@njit(parallel=True, cache=True)
def _rasterize_backward(offsets, entries, means2d, conics, opacities, colors, background,
                        n_contrib, grad_color, width, height, n_tiles_x):
    """Per-entry gradients: (d mean x, d mean y, d conic a, b, c, d opacity, d rgb)."""
    n_tiles = offsets.shape[0] - 1
    out = np.zeros((entries.shape[0], 9))
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        m = stop - start
        s_e = np.empty(m, dtype=np.int64)
        s_alpha = np.empty(m)
        s_T = np.empty(m)
        s_dx = np.empty(m)
        s_dy = np.empty(m)
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                g0 = grad_color[py, px, 0]
                g1 = grad_color[py, px, 1]
                g2 = grad_color[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                k = 0
                T = 1.0
                for e in range(start, start + n_contrib[py, px]):
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q > 9.0:
                        continue
                    alpha = opacities[g] * np.exp(-0.5 * q)
                    s_e[k] = e
                    s_alpha[k] = alpha
                    s_T[k] = T
                    s_dx[k] = dx
                    s_dy[k] = dy
                    k += 1
                    T = T * (1.0 - alpha)
                # colour accumulated behind each contributor, built back to front
                a0 = background[0]
                a1 = background[1]
                a2 = background[2]
                for j in range(k - 1, -1, -1):
                    e = s_e[j]
                    g = entries[e]
                    alpha = s_alpha[j]
                    Tj = s_T[j]
                    w = alpha * Tj
                    out[e, 6] += g0 * w
                    out[e, 7] += g1 * w
                    out[e, 8] += g2 * w
                    c0 = colors[g, 0]
                    c1 = colors[g, 1]
                    c2 = colors[g, 2]
                    d_alpha = Tj * (g0 * (c0 - a0) + g1 * (c1 - a1) + g2 * (c2 - a2))
                    a0 = c0 * alpha + (1.0 - alpha) * a0
                    a1 = c1 * alpha + (1.0 - alpha) * a1
                    a2 = c2 * alpha + (1.0 - alpha) * a2
                    G = alpha / opacities[g]
                    out[e, 5] += d_alpha * G
                    d_q = -0.5 * alpha * d_alpha
                    dx = s_dx[j]
                    dy = s_dy[j]
                    ca = conics[g, 0]
                    cb = conics[g, 1]
                    cc = conics[g, 2]
                    # q = a dx^2 + 2 b dx dy + c dy^2 with dx = px - mean_x
                    out[e, 0] += d_q * (-2.0) * (ca * dx + cb * dy)
                    out[e, 1] += d_q * (-2.0) * (cb * dx + cc * dy)
                    out[e, 2] += d_q * dx * dx
                    out[e, 3] += d_q * 2.0 * dx * dy
                    out[e, 4] += d_q * dy * dy
    return out


@njit(cache=True)
def _reduce_entries(entries, entry_grads, n):
    out = np.zeros((n, entry_grads.shape[1]))
    for e in range(entries.shape[0]):
        g = entries[e]
        for k in range(entry_grads.shape[1]):
            out[g, k] += entry_grads[e, k]
    return out


# --------------------------------------------------------------------------
# public API


@dataclass
class RenderStats:
    n_gaussians: int = 0
    n_culled: int = 0
    n_skipped: int = 0
    n_entries: int = 0
    timings_ms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gaussian_count": self.n_gaussians,
            "culled_count": self.n_culled,
            "skipped_count": self.n_skipped,
            "tile_entries": self.n_entries,
            "timing_ms": dict(self.timings_ms),
        }


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    final_T: np.ndarray  # (H, W)
    stats: RenderStats
    _state: object = field(default=None, repr=False)


@dataclass
class GradientBuffer:
    """Per-Gaussian gradients laid out like ``GaussianScene``."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "GradientBuffer"):
        self.means += other.means
        self.quats += other.quats
        self.log_scales += other.log_scales
        self.logit_opacities += other.logit_opacities
        self.colors += other.colors
        return self

    def arrays(self):
        return [self.means, self.quats, self.log_scales, self.logit_opacities, self.colors]

    def check_finite(self) -> None:
        for name, arr in zip(("means", "quats", "log_scales", "logit_opacities", "colors"), self.arrays()):
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if bad.any():
                raise GradientError(f"non-finite gradient in {name} for Gaussian {int(np.flatnonzero(bad)[0])}")


@dataclass
class Rasterizer:
    """Projection and tile lists for one (scene, camera); reusable across colour sets."""

    proj: Projection
    offsets: np.ndarray
    entries: np.ndarray
    opacities: np.ndarray
    n_tiles_x: int
    timings_ms: dict

    @classmethod
    def prepare(cls, scene: GaussianScene, cam: Camera) -> "Rasterizer":
        t0 = time.perf_counter()
        proj = project_gaussians(scene, cam)
        t1 = time.perf_counter()
        ntx = (cam.width + TILE - 1) // TILE
        nty = (cam.height + TILE - 1) // TILE
        offsets, entries = _bin_tiles(proj.order, proj.tile_rect, ntx, nty)
        t2 = time.perf_counter()
        return cls(proj, offsets, entries, sigmoid(scene.logit_opacities), ntx,
                   {"project": 1e3 * (t1 - t0), "bin": 1e3 * (t2 - t1)})

    def forward(self, colors: np.ndarray, background=(0.0, 0.0, 0.0)) -> RenderOutput:
        cam = self.proj.cam
        bg = np.asarray(background, dtype=np.float64).reshape(3)
        t0 = time.perf_counter()
        color, depth, T, n_contrib = _rasterize_forward(
            self.offsets, self.entries, self.proj.means2d, self.proj.conics, self.opacities,
            np.ascontiguousarray(colors, dtype=np.float64), self.proj.depths, bg,
            cam.width, cam.height, self.n_tiles_x,
        )
        t1 = time.perf_counter()
        timings = dict(self.timings_ms, rasterize=1e3 * (t1 - t0))
        stats = RenderStats(len(self.opacities), self.proj.n_culled, self.proj.n_skipped,
                            int(self.entries.shape[0]), timings)
        state = (np.ascontiguousarray(colors, dtype=np.float64), bg, n_contrib)
        return RenderOutput(color, depth, 1.0 - T, T, stats, state)

    def backward_screen(self, out: RenderOutput, grad_color: np.ndarray) -> np.ndarray:
        """Per-Gaussian screen-space gradients (N, 9)."""
        cam = self.proj.cam
        colors, bg, n_contrib = out._state
        entry_grads = _rasterize_backward(
            self.offsets, self.entries, self.proj.means2d, self.proj.conics, self.opacities, colors, bg,
            n_contrib, np.ascontiguousarray(grad_color, dtype=np.float64), cam.width, cam.height,
            self.n_tiles_x,
        )
        return _reduce_entries(self.entries, entry_grads, len(self.opacities))

    def backward_geometry(self, scene: GaussianScene, screen_grads: np.ndarray) -> GradientBuffer:
        """Chain screen-space gradients through the projection to scene parameters."""
        proj = self.proj
        cam = proj.cam
        n = len(scene)
        buf = GradientBuffer.zeros(n)
        buf.colors = screen_grads[:, 6:9].copy()
        op = self.opacities
        buf.logit_opacities = screen_grads[:, 5] * op * (1.0 - op)
        vis = proj.visible
        if not vis.any():
            return buf
        g2 = screen_grads[vis]
        K = np.empty((len(g2), 2, 2))
        ca, cb, cc = proj.conics[vis].T
        K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = ca, cb, cb, cc
        GK = np.empty_like(K)
        GK[:, 0, 0] = g2[:, 2]
        GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g2[:, 3]
        GK[:, 1, 1] = g2[:, 4]
        G_S2 = -K @ GK @ K
        J = proj.jacobians[vis]
        M = proj.cov_cam[vis]
        Jt = np.swapaxes(J, 1, 2)
        G_M = Jt @ G_S2 @ J
        G_J = 2.0 * G_S2 @ J @ M
        R = cam.R
        G_S3 = R.T @ G_M @ R
        Rg = proj.rotations[vis]
        s2 = np.exp(2.0 * scene.log_scales[vis])
        G_Rg = 2.0 * G_S3 @ Rg * s2[:, None, :]
        inner = np.swapaxes(Rg, 1, 2) @ G_S3 @ Rg
        buf.log_scales[vis] = 2.0 * s2 * np.diagonal(inner, axis1=1, axis2=2)
        buf.quats[vis] = rotmat_grad_to_quat_grad(scene.quats[vis], G_Rg)

        x, y, z = proj.points_cam[vis].T
        fx, fy = cam.fx, cam.fy
        gu, gv = g2[:, 0], g2[:, 1]
        gx = gu * fx / z - G_J[:, 0, 2] * fx / z**2
        gy = gv * fy / z - G_J[:, 1, 2] * fy / z**2
        gz = (-gu * fx * x / z**2 - gv * fy * y / z**2
              - G_J[:, 0, 0] * fx / z**2 + G_J[:, 0, 2] * 2.0 * fx * x / z**3
              - G_J[:, 1, 1] * fy / z**2 + G_J[:, 1, 2] * 2.0 * fy * y / z**3)
        buf.means[vis] = np.stack([gx, gy, gz], axis=1) @ R
        return buf


def _clip_colors(colors):
    c = np.asarray(colors, dtype=np.float64)
    return np.clip(c, 0.0, 1.0), (c >= 0.0) & (c <= 1.0)


def render(scene: GaussianScene, cam: Camera, background=(0.0, 0.0, 0.0), colors=None) -> RenderOutput:
    """Render color, expected depth and alpha. ``colors`` overrides the scene colors.

    Colors are clamped to [0, 1] at the rasterizer input.
    """
    raster = Rasterizer.prepare(scene, cam)
    clipped, inside = _clip_colors(scene.colors if colors is None else colors)
    out = raster.forward(clipped, background)
    out._state = (raster, inside) + out._state
    return out


def render_backward(scene: GaussianScene, cam: Camera, upstream_grad, out: RenderOutput | None = None,
                    background=(0.0, 0.0, 0.0), colors=None) -> GradientBuffer:
    """Gradients of sum(upstream * color) w.r.t. every scene parameter.

    Reuses the forward state held by ``out`` when given; otherwise re-renders.
    The color gradient is taken w.r.t. the unclamped input colors.
    """
    if out is None or out._state is None:
        out = render(scene, cam, background, colors)
    raster, inside = out._state[0], out._state[1]
    inner = RenderOutput(out.color, out.depth, out.alpha, out.final_T, out.stats, out._state[2:])
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(cam.height, cam.width, 3)
    screen = raster.backward_screen(inner, g)
    buf = raster.backward_geometry(scene, screen)
    buf.colors = np.where(inside, buf.colors, 0.0)
    buf.check_finite()
    return buf


# --------------------------------------------------------------------------
# benchmark


def render_benchmark(scene: GaussianScene, cam: Camera, repeats: int = 5, threads: int | None = None,
                     background=(0.0, 0.0, 0.0)) -> dict:
    """Median timing over ``repeats`` forward renders (after one warm-up)."""
    used = set_threads(threads)
    render(scene, cam, background)
    frames, totals, stages = [], [], {"project": [], "bin": [], "rasterize": []}
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = render(scene, cam, background)
        totals.append(1e3 * (time.perf_counter() - t0))
        for k in stages:
            stages[k].append(out.stats.timings_ms[k])
        frames.append(out.color)
    identical = all(np.array_equal(frames[0], f) for f in frames[1:])
    ms = float(np.median(totals))
    return {
        "threads": used,
        "repeats": len(totals),
        "width": cam.width,
        "height": cam.height,
        "gaussians": len(scene),
        "ms_per_frame": ms,
        "fps": 1e3 / ms if ms > 0 else float("inf"),
        "stage_ms": {k: float(np.median(v)) for k, v in stages.items()},
        "deterministic": bool(identical),
        "image": frames[0],
        "stats": out.stats.to_dict(),
    }
