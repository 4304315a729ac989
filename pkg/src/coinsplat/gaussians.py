"""Gaussian parameters, covariance construction and triangle-mesh binding.

Quaternions are stored (w, x, y, z). Bound Gaussians live in the local frame
of a host triangle: the frame rotation has columns (first edge, normal,
edge x normal), its origin is the centroid and its length unit is the square
root of the triangle area.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AREA_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    pass


# --------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """Matrix L(a) with a ⊗ b = L(a) @ b."""
    w, x, y, z = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of the normalized quaternion; works on (..., 4)."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, batched over (..., 3, 3). Returns w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    k = np.argmax(np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1), axis=1)
    q = np.empty((len(m), 4))
    for case in range(4):
        sel = k == case
        if not sel.any():
            continue
        a = m[sel]
        if case == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack([0.25 * s, (a[:, 2, 1] - a[:, 1, 2]) / s, (a[:, 0, 2] - a[:, 2, 0]) / s,
                               (a[:, 1, 0] - a[:, 0, 1]) / s], axis=1)
        elif case == 1:
            s = 2.0 * np.sqrt(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2])
            q[sel] = np.stack([(a[:, 2, 1] - a[:, 1, 2]) / s, 0.25 * s, (a[:, 0, 1] + a[:, 1, 0]) / s,
                               (a[:, 0, 2] + a[:, 2, 0]) / s], axis=1)
        elif case == 2:
            s = 2.0 * np.sqrt(1.0 + a[:, 1, 1] - a[:, 0, 0] - a[:, 2, 2])
            q[sel] = np.stack([(a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 0, 1] + a[:, 1, 0]) / s, 0.25 * s,
                               (a[:, 1, 2] + a[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + a[:, 2, 2] - a[:, 0, 0] - a[:, 1, 1])
            q[sel] = np.stack([(a[:, 1, 0] - a[:, 0, 1]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s,
                               (a[:, 1, 2] + a[:, 2, 1]) / s, 0.25 * s], axis=1)
    q = np.where(q[:, :1] < 0, -q, q)
    return quat_normalize(q).reshape(R.shape[:-2] + (4,))


def rotmat_grad_to_quat_grad(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backpropagate dL/dR (..., 3, 3) through ``quat_to_rotmat`` (incl. normalization)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    g = dR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    qn = q / norm
    # through q / |q|
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


# --------------------------------------------------------------------------
# free Gaussians


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianScene:
    """A set of world-space Gaussians with flat RGB colors.

    Arrays are float64: means (N, 3), quats (N, 4), log_scales (N, 3),
    logit_opacities (N,), colors (N, 3).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.logit_opacities = np.ascontiguousarray(self.logit_opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.logit_opacities.copy(), self.colors.copy())

    def subset(self, index) -> "GaussianScene":
        return GaussianScene(self.means[index], self.quats[index], self.log_scales[index],
                             self.logit_opacities[index], self.colors[index])

    def transformed(self, transform) -> "GaussianScene":
        """Apply a rigid transform to every Gaussian."""
        q_t = rotmat_to_quat(transform.rotation)
        return GaussianScene(transform.apply(self.means), quat_multiply(q_t, quat_normalize(self.quats)),
                             self.log_scales.copy(), self.logit_opacities.copy(), self.colors.copy())


def covariance(quats, log_scales) -> np.ndarray:
    """Σ = R diag(exp(2 log_scale)) Rᵀ, batched; symmetric by construction."""
    R = quat_to_rotmat(quats)
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# --------------------------------------------------------------------------
# parametric mesh


@dataclass
class ParametricMesh:
    """Triangle mesh with linear blendshapes; deformed = base + Σ w_b basis_b."""

    vertices: np.ndarray
    faces: np.ndarray
    blendshapes: np.ndarray = field(default=None)
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValueError("face indices out of range")
        if self.blendshapes is None:
            self.blendshapes = np.zeros((0, nv, 3))
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64).reshape(-1, nv, 3)
        if self.weights is None:
            self.weights = np.zeros(len(self.blendshapes))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(len(self.blendshapes))

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def deformed(self, weights=None) -> np.ndarray:
        """Deformed vertex positions (the mesh state)."""
        w = self.weights if weights is None else np.asarray(weights, dtype=np.float64)
        if len(w) == 0:
            return self.vertices.copy()
        return self.vertices + np.tensordot(w, self.blendshapes, axes=1)

    def with_weights(self, weights) -> "ParametricMesh":
        return ParametricMesh(self.vertices, self.faces, self.blendshapes, weights)

    def transformed(self, transform) -> "ParametricMesh":
        """Rigidly transform base vertices and rotate the blendshape offsets."""
        bs = self.blendshapes @ transform.rotation.T
        return ParametricMesh(transform.apply(self.vertices), self.faces, bs, self.weights)


@dataclass(frozen=True)
class MeshState:
    vertices: np.ndarray
    faces: np.ndarray


def mesh_state(mesh: ParametricMesh, weights=None) -> MeshState:
    return MeshState(mesh.deformed(weights), mesh.faces)


def _state(mesh_or_state):
    if isinstance(mesh_or_state, ParametricMesh):
        return mesh_or_state.deformed(), mesh_or_state.faces
    if isinstance(mesh_or_state, MeshState):
        return mesh_or_state.vertices, mesh_or_state.faces
    verts, faces = mesh_or_state
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def triangle_frames(mesh_or_state, tri_index=None):
    """Frames of many triangles: rotations (F, 3, 3), anchors (F, 3), scale metrics (F,)."""
    verts, faces = _state(mesh_or_state)
    idx = np.arange(len(faces)) if tri_index is None else np.atleast_1d(np.asarray(tri_index))
    tri = verts[faces[idx]]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    cross = np.cross(e1, e2)
    twice_area = np.linalg.norm(cross, axis=-1)
    area = 0.5 * twice_area
    bad = np.flatnonzero(~(area > AREA_EPS))
    if bad.size:
        raise DegenerateGeometryError(f"degenerate triangle: face {int(idx[bad[0]])} has area {area[bad[0]]:.3g}")
    a = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    n = cross / twice_area[:, None]
    b = np.cross(a, n)
    rot = np.stack([a, n, b], axis=-1)
    anchor = tri.mean(axis=1)
    return rot, anchor, np.sqrt(area)


def triangle_frame(mesh_or_state, tri_index: int):
    """(rotation 3x3, anchor 3-vector, scale_metric) of one triangle."""
    rot, anchor, s = triangle_frames(mesh_or_state, [tri_index])
    return rot[0], anchor[0], float(s[0])


def triangle_frames_jvp(mesh_or_state, vertex_velocity, tri_index=None):
    """Directional derivatives (dR, d_anchor, d_scale) of the triangle frames."""
    verts, faces = _state(mesh_or_state)
    dv = np.asarray(vertex_velocity, dtype=np.float64)
    idx = np.arange(len(faces)) if tri_index is None else np.atleast_1d(np.asarray(tri_index))
    tri, dtri = verts[faces[idx]], dv[faces[idx]]
    e1, de1 = tri[:, 1] - tri[:, 0], dtri[:, 1] - dtri[:, 0]
    e2, de2 = tri[:, 2] - tri[:, 0], dtri[:, 2] - dtri[:, 0]

    def dnormalize(v, dvv):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        u = v / n
        return u, (dvv - u * np.sum(u * dvv, axis=-1, keepdims=True)) / n

    a, da = dnormalize(e1, de1)
    c = np.cross(e1, e2)
    dc = np.cross(de1, e2) + np.cross(e1, de2)
    n, dn = dnormalize(c, dc)
    b, db = np.cross(a, n), np.cross(da, n) + np.cross(a, dn)
    dR = np.stack([da, dn, db], axis=-1)
    twice_area = np.linalg.norm(c, axis=-1)
    d_twice_area = np.sum(n * dc, axis=-1)
    s = np.sqrt(0.5 * twice_area)
    ds = 0.25 * d_twice_area / s
    return dR, dtri.mean(axis=1), ds


# --------------------------------------------------------------------------
# binding


@dataclass
class TriangleBinding:
    """Per-Gaussian binding parameters (arrays over N bound Gaussians)."""

    tri_index: np.ndarray
    local_position: np.ndarray
    local_rotation: np.ndarray
    relative_log_scale: np.ndarray

    def __post_init__(self):
        self.tri_index = np.ascontiguousarray(self.tri_index, dtype=np.int64).reshape(-1)
        n = len(self.tri_index)
        self.local_position = np.ascontiguousarray(self.local_position, dtype=np.float64).reshape(n, 3)
        self.local_rotation = np.ascontiguousarray(self.local_rotation, dtype=np.float64).reshape(n, 4)
        self.relative_log_scale = np.ascontiguousarray(self.relative_log_scale, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.tri_index)

    def copy(self) -> "TriangleBinding":
        return TriangleBinding(self.tri_index.copy(), self.local_position.copy(),
                               self.local_rotation.copy(), self.relative_log_scale.copy())

    def subset(self, index) -> "TriangleBinding":
        return TriangleBinding(self.tri_index[index], self.local_position[index],
                               self.local_rotation[index], self.relative_log_scale[index])

    def validate(self, n_faces: int) -> None:
        if len(self) and (self.tri_index.min() < 0 or self.tri_index.max() >= n_faces):
            raise ValueError(f"binding references a face outside [0, {n_faces})")


@dataclass(frozen=True)
class MeshFrames:
    """Triangle frames of one mesh state, cached for repeated realize calls."""

    rotations: np.ndarray
    anchors: np.ndarray
    scales: np.ndarray
    quats: np.ndarray

    @classmethod
    def of(cls, mesh_or_state) -> "MeshFrames":
        rot, anchor, s = triangle_frames(mesh_or_state)
        return cls(rot, anchor, s, rotmat_to_quat(rot))


def _frames(mesh_or_state) -> MeshFrames:
    return mesh_or_state if isinstance(mesh_or_state, MeshFrames) else MeshFrames.of(mesh_or_state)


def realize_geometry(binding: TriangleBinding, mesh_or_state):
    """World means, quaternions and log-scales of bound Gaussians."""
    fr = _frames(mesh_or_state)
    binding.validate(len(fr.scales))
    i = binding.tri_index
    R, A, S = fr.rotations[i], fr.anchors[i], fr.scales[i]
    means = A + S[:, None] * np.einsum("nij,nj->ni", R, binding.local_position)
    quats = quat_multiply(fr.quats[i], quat_normalize(binding.local_rotation))
    log_scales = binding.relative_log_scale + np.log(S)[:, None]
    return means, quats, log_scales


def realize(binding: TriangleBinding, mesh_or_state, logit_opacities, colors) -> GaussianScene:
    """Turn bound parameters into world-space Gaussians on the given mesh state."""
    means, quats, log_scales = realize_geometry(binding, mesh_or_state)
    return GaussianScene(means, quats, log_scales, logit_opacities, colors)


def realize_pullback(binding: TriangleBinding, mesh_or_state, d_means, d_quats, d_log_scales):
    """Map world-space gradients back onto binding parameters.

    Returns (d_local_position, d_local_rotation, d_relative_log_scale); the
    rotation gradient includes the local quaternion normalization.
    """
    fr = _frames(mesh_or_state)
    i = binding.tri_index
    R, S = fr.rotations[i], fr.scales[i]
    d_pos = S[:, None] * np.einsum("nji,nj->ni", R, d_means)
    d_qn = np.einsum("nji,nj->ni", quat_left_matrix(fr.quats[i]), d_quats)
    q = binding.local_rotation
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    d_rot = (d_qn - qn * np.sum(d_qn * qn, axis=-1, keepdims=True)) / norm
    return d_pos, d_rot, np.array(d_log_scales, dtype=np.float64)


def realize_means_jvp(binding: TriangleBinding, mesh_or_state, vertex_velocity) -> np.ndarray:
    """Directional derivative of realized means for a vertex velocity field."""
    rot, _, s = triangle_frames(mesh_or_state)
    dR, dA, dS = triangle_frames_jvp(mesh_or_state, vertex_velocity)
    i = binding.tri_index
    p = binding.local_position
    return (dA[i] + dS[i, None] * np.einsum("nij,nj->ni", rot[i], p)
            + s[i, None] * np.einsum("nij,nj->ni", dR[i], p))


def sample_barycentric(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform barycentric coordinates (n, 3) by folding the unit square."""
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    return np.column_stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]])


def init_on_mesh(mesh, n_per_face: int = 1, rng_seed: int = 0) -> TriangleBinding:
    """Scatter ``n_per_face`` Gaussians uniformly over every face.

    Local rotation is identity and the 1-sigma extent is half the triangle's
    scale metric.
    """
    verts, faces = _state(mesh)
    rng = np.random.default_rng(rng_seed)
    F = len(faces)
    tri_index = np.repeat(np.arange(F), n_per_face)
    bary = sample_barycentric(rng, len(tri_index))
    rot, anchor, s = triangle_frames((verts, faces))
    points = np.einsum("nk,nkj->nj", bary, verts[faces[tri_index]])
    local = np.einsum("nji,nj->ni", rot[tri_index], points - anchor[tri_index]) / s[tri_index, None]
    n = len(tri_index)
    return TriangleBinding(
        tri_index,
        local,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full((n, 3), np.log(0.5)),
    )


# --------------------------------------------------------------------------
# primitive meshes


def icosphere(subdivisions: int = 2, radius: float = 1.0):
    """Vertices and outward-wound faces of a subdivided icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64)
