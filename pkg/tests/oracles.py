"""Independent reference implementations used only by the tests.

These are written for clarity rather than speed and share no code with the
package beyond plain data containers.
"""

from __future__ import annotations

import numpy as np


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_one(mean, quat, log_scale, cam, floor=0.3, near=0.01):
    """EWA splat of one Gaussian, or None when it is behind the near plane."""
    R, t = cam.R, cam.t
    p = R @ mean + t
    if p[2] <= near:
        return None
    x, y, z = p
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2],
                  [0.0, cam.fy / z, -cam.fy * y / z**2]])
    Rg = quat_to_matrix(quat)
    S = np.diag(np.exp(2 * np.asarray(log_scale)))
    cov3 = Rg @ S @ Rg.T
    cov2 = J @ R @ cov3 @ R.T @ J.T + floor * np.eye(2)
    mean2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return mean2, cov2, z


def naive_render(scene, cam, background=(0.0, 0.0, 0.0), colors=None):
    """O(N·H·W) front-to-back compositing, one pixel at a time.

    Returns (color, depth, alpha, final_T).
    """
    colors = np.clip(scene.colors if colors is None else colors, 0.0, 1.0)
    bg = np.asarray(background, dtype=np.float64)
    opac = 1.0 / (1.0 + np.exp(-scene.logit_opacities))
    splats = []
    for i in range(len(scene)):
        pr = project_one(scene.means[i], scene.quats[i], scene.log_scales[i], cam)
        if pr is None:
            continue
        mean2, cov2, z = pr
        if np.linalg.det(cov2) < 1e-12:
            continue
        splats.append((z, i, mean2, np.linalg.inv(cov2)))
    splats.sort(key=lambda s: (s[0], s[1]))
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    Tout = np.ones((H, W))
    for py in range(H):
        for px in range(W):
            T, acc, d = 1.0, np.zeros(3), 0.0
            for z, i, mean2, inv in splats:
                delta = np.array([px, py], dtype=np.float64) - mean2
                q = delta @ inv @ delta
                if q > 9.0:
                    continue
                a = opac[i] * np.exp(-0.5 * q)
                acc += colors[i] * a * T
                d += z * a * T
                T *= 1.0 - a
                if T < 1e-4:
                    break
            color[py, px] = acc + bg * T
            alpha = 1.0 - T
            depth[py, px] = d / max(alpha, 1e-8) if alpha > 0 else 0.0
            Tout[py, px] = T
    return color, depth, 1.0 - Tout, Tout


# --------------------------------------------------------------------------
# finite differences


def central_difference(f, x, h):
    """Central differences of scalar ``f`` at every entry of ``x`` (copied)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def fd_check(f, x, analytic, h=1e-4, rtol=1e-3, atol=1e-6, signature=None, min_h=1e-7):
    """Compare ``analytic`` against central differences entry by entry.

    Relative error is |a - n| / max(|a|, |n|) unless both are below ``atol``.
    ``signature(x)`` should return a hashable description of the discrete
    state (which pixels each primitive touches, sort order); when it differs
    between x+h and x-h the difference straddles a discontinuity, so the step
    is shrunk tenfold until it does not or ``min_h`` is reached. Returns the
    list of failing (index, analytic, numeric, h) tuples.
    """
    x = np.array(x, dtype=np.float64)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    failures = []
    for k in range(flat.size):
        old = flat[k]
        step = h
        while True:
            flat[k] = old + step
            fp = f(x)
            sp = signature(x) if signature else None
            flat[k] = old - step
            fm = f(x)
            sm = signature(x) if signature else None
            flat[k] = old
            if sp == sm or step / 10 < min_h:
                break
            step /= 10
        n = (fp - fm) / (2 * step)
        err = abs(a[k] - n)
        if err > atol and err > rtol * max(abs(a[k]), abs(n)):
            failures.append((k, float(a[k]), float(n), step))
    return failures


def support_signature(scene_fn, cam):
    """Signature of the discrete render state: per-pixel contributor lists."""
    from coinsplat.render import Rasterizer

    def sig(x):
        scene = scene_fn(x)
        r = Rasterizer.prepare(scene, cam)
        p = r.proj
        H, W = cam.height, cam.width
        yy, xx = np.mgrid[0:H, 0:W]
        parts = [tuple(p.order)]
        for g in p.order:
            dx = xx - p.means2d[g, 0]
            dy = yy - p.means2d[g, 1]
            a, b, c = p.conics[g]
            inside = (a * dx * dx + 2 * b * dx * dy + c * dy * dy) <= 9.0
            parts.append(np.packbits(inside).tobytes())
        out = r.forward(np.clip(scene.colors, 0, 1))
        parts.append(np.packbits(out.final_T < 1e-4).tobytes())
        return tuple(parts)

    return sig


# --------------------------------------------------------------------------
# warping


def warp_oracle(anchor_img, anchor_depth, anchor_cam, target_cam, target_depth, tol):
    """Per-pixel backward warp with explicit matrices and loops."""
    H, W = target_cam.height, target_cam.width
    Ha, Wa = anchor_cam.height, anchor_cam.width
    Kt_inv = np.linalg.inv(target_cam.K)
    Ka = anchor_cam.K
    # camera-to-camera transform as a single 4x4 matrix
    Tt = np.eye(4)
    Tt[:3, :3], Tt[:3, 3] = target_cam.R, target_cam.t
    Ta = np.eye(4)
    Ta[:3, :3], Ta[:3, 3] = anchor_cam.R, anchor_cam.t
    M = Ta @ np.linalg.inv(Tt)
    out = np.zeros((H, W, 3))
    mask = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            d = target_depth[v, u]
            if not (np.isfinite(d) and d > 0):
                continue
            pc = d * (Kt_inv @ np.array([u, v, 1.0]))
            pa = (M @ np.append(pc, 1.0))[:3]
            if pa[2] <= 1e-8:
                continue
            uvw = Ka @ pa
            ua, va = uvw[0] / uvw[2], uvw[1] / uvw[2]
            if abs(ua - round(ua)) < 1e-9:
                ua = float(round(ua))
            if abs(va - round(va)) < 1e-9:
                va = float(round(va))
            if not (-0.5 <= ua <= Wa - 0.5 and -0.5 <= va <= Ha - 0.5):
                continue
            uc, vc = min(max(ua, 0.0), Wa - 1.0), min(max(va, 0.0), Ha - 1.0)
            x0, y0 = int(np.floor(uc)), int(np.floor(vc))
            fx, fy = uc - x0, vc - y0
            taps = []
            for (yy, xx, w) in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                                (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
                taps.append((min(yy, Ha - 1), min(xx, Wa - 1), w))
            ok = True
            ds, col = 0.0, np.zeros(3)
            for yy, xx, w in taps:
                if w == 0:
                    continue
                da = anchor_depth[yy, xx]
                if not (np.isfinite(da) and da > 0):
                    ok = False
                    break
                ds += w * da
                col += w * anchor_img[yy, xx]
            if not ok or abs(ds - pa[2]) > tol * pa[2]:
                continue
            out[v, u] = col
            mask[v, u] = 1.0
    return out, mask


def pooled_sign_signature(a, b, levels=(2, 4)) -> bytes:
    """Signs of patch-mean differences: the kinks of the pyramid L1."""
    out = []
    for f in levels:
        h, w = (a.shape[0] // f) * f, (a.shape[1] // f) * f
        d = (a[:h, :w] - b[:h, :w]).reshape(h // f, f, w // f, f, -1).mean(axis=(1, 3))
        out.append(np.packbits(d > 0).tobytes())
    return b"".join(out)
