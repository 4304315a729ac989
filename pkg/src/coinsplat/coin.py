"""Consistent/inconsistent (COIN) training.

A mesh-bound Gaussian base model holds everything that is shared between
views. A small two-layer MLP, fed a learnable per-view embedding, the base
color and a fixed positional code of each Gaussian, predicts a per-view color
offset. Pixel losses (L1 + DSSIM) supervise the render with offsets, a
perceptual-structure loss supervises the plain base render, and an L1 penalty
keeps offsets small. At inference the reference view's embedding is reused
for every camera.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .dataset import DatasetError, ViewDataset
from .gaussians import (
    GaussianScene,
    MeshFrames,
    ParametricMesh,
    TriangleBinding,
    icosphere,
    init_on_mesh,
    logit,
    realize,
    realize_geometry,
    realize_pullback,
)
from .io import read_blob, write_blob
from .losses import dssim_grad, get_structure_loss, l1_grad, psnr
from .render import Rasterizer, RenderOutput

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_lpips: float = 0.05
    lambda_offset: float = 1.0
    phase1_iters: int = 2000
    phase2_iters: int = 6000
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.1
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_mlp: float = 1e-3
    lr_embedding: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    embed_dim: int = 16
    hidden_width: int = 64
    pos_freqs: int = 4
    n_per_face: int = 1
    init_opacity: float = 0.5
    init_color: float = 0.5
    embedding_init_std: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    structure_loss: str = "pyramid"
    mode: str = "coin"
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_ssim", "lambda_lpips", "lambda_offset"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("phase1_iters", "phase2_iters", "pos_freqs", "log_every", "checkpoint_every"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.mode not in ("coin", "baseline"):
            raise ConfigurationError(f"mode must be 'coin' or 'baseline', got {self.mode!r}")
        if self.embed_dim < 1 or self.hidden_width < 1 or self.n_per_face < 1:
            raise ConfigurationError("embed_dim, hidden_width and n_per_face must be >= 1")
        self.background = tuple(float(v) for v in self.background)
        get_structure_loss(self.structure_loss)

    @property
    def total_iters(self) -> int:
        return int(self.phase1_iters) + int(self.phase2_iters)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as f:
            data = tomllib.load(f)
        return cls.from_dict(data.get("train", data))


# --------------------------------------------------------------------------
# network pieces


def position_embedding(positions, n_freqs: int) -> np.ndarray:
    """Sinusoidal code [sin(2^k pi p), cos(2^k pi p)] for k < n_freqs; (N, 6 n_freqs)."""
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if n_freqs < 0:
        raise ValueError("n_freqs must be >= 0")
    parts = []
    for k in range(n_freqs):
        a = (2.0**k) * np.pi * p
        parts += [np.sin(a), np.cos(a)]
    if not parts:
        return np.zeros((len(p), 0))
    return np.concatenate(parts, axis=1)


def normalize_positions(positions, center=None, half_extent=None):
    """Map positions into [-1, 1] using a box center and its largest half extent."""
    p = np.asarray(positions, dtype=np.float64)
    if center is None:
        lo, hi = p.min(axis=0), p.max(axis=0)
        center = 0.5 * (lo + hi)
        half_extent = max(float(np.max(hi - lo)) / 2, 1e-12)
    return (p - center) / half_extent, np.asarray(center), float(half_extent)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class InconsistencyMLP:
    """Two weight layers with a softplus in between and a linear 3-vector output."""

    PARAMS = ("W1", "b1", "W2", "b2")

    def __init__(self, in_dim: int, hidden: int = 64, rng: np.random.Generator | None = None, params=None):
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        if params is not None:
            self.params = {k: np.array(params[k], dtype=np.float64) for k in self.PARAMS}
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = {
                "W1": rng.normal(0.0, 1.0 / math.sqrt(max(self.in_dim, 1)), (self.in_dim, self.hidden)),
                "b1": np.zeros(self.hidden),
                # zero output layer: offsets start at exactly zero
                "W2": np.zeros((self.hidden, 3)),
                "b2": np.zeros(3),
            }

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MLP expects {self.in_dim} input features, got {x.shape[-1]}")
        z = x @ self.params["W1"] + self.params["b1"]
        h = _softplus(z)
        out = h @ self.params["W2"] + self.params["b2"]
        return out, (x, z, h)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, g_out):
        x, z, h = cache
        g_out = np.asarray(g_out, dtype=np.float64)
        grads = {"W2": h.T @ g_out, "b2": g_out.sum(axis=0)}
        g_h = g_out @ self.params["W2"].T
        g_z = g_h * _sigmoid(z)
        grads["W1"] = x.T @ g_z
        grads["b1"] = g_z.sum(axis=0)
        return grads, g_z @ self.params["W1"].T


def mlp_input(e_view, colors, e_g) -> np.ndarray:
    c = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    n = len(c)
    ev = np.broadcast_to(np.asarray(e_view, dtype=np.float64).reshape(1, -1), (n, np.size(e_view)))
    eg = np.asarray(e_g, dtype=np.float64).reshape(n, -1)
    return np.concatenate([ev, c, eg], axis=1)


def color_offset(e_view, c, e_g, mlp: InconsistencyMLP) -> np.ndarray:
    """Per-Gaussian color offset; accepts a single Gaussian or a batch."""
    single = np.ndim(c) == 1
    out = mlp(mlp_input(e_view, c, e_g))
    return out[0] if single else out


def combined_color(c, c_offset) -> np.ndarray:
    """c* = c + c_offset (unclamped; the rasterizer clamps its input)."""
    return np.asarray(c, dtype=np.float64) + np.asarray(c_offset, dtype=np.float64)


# --------------------------------------------------------------------------
# model


@dataclass
class CoinModel:
    mesh: ParametricMesh
    binding: TriangleBinding
    logit_opacities: np.ndarray
    colors: np.ndarray
    embeddings: np.ndarray
    mlp: InconsistencyMLP
    pos_embed: np.ndarray
    view_ids: list
    reference_view: int
    background: tuple = (0.0, 0.0, 0.0)
    pos_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pos_half_extent: float = 1.0
    _frames: MeshFrames = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.binding)

    @property
    def frames(self) -> MeshFrames:
        if self._frames is None:
            self._frames = MeshFrames.of(self.mesh)
        return self._frames

    def invalidate(self) -> None:
        """Drop cached mesh frames after editing the mesh."""
        self._frames = None

    def scene(self, colors=None) -> GaussianScene:
        return realize(self.binding, self.frames, self.logit_opacities,
                       self.colors if colors is None else colors)

    def view_index(self, view_id: int) -> int:
        try:
            return self.view_ids.index(int(view_id))
        except ValueError:
            raise KeyError(f"unknown view id {view_id}; available: {self.view_ids}") from None

    def offsets(self, view_id: int) -> np.ndarray:
        e_view = self.embeddings[self.view_index(view_id)]
        return self.mlp(mlp_input(e_view, self.colors, self.pos_embed))

    def param_arrays(self) -> dict:
        """Every learnable array, keyed by name (live references)."""
        d = {
            "local_position": self.binding.local_position,
            "local_rotation": self.binding.local_rotation,
            "relative_log_scale": self.binding.relative_log_scale,
            "logit_opacities": self.logit_opacities,
            "colors": self.colors,
            "embeddings": self.embeddings,
        }
        d.update(self.mlp.params)
        return d


PARAM_GROUPS = {
    "local_position": "lr_position",
    "local_rotation": "lr_rotation",
    "relative_log_scale": "lr_scale",
    "logit_opacities": "lr_opacity",
    "colors": "lr_color",
    "embeddings": "lr_embedding",
    "W1": "lr_mlp",
    "b1": "lr_mlp",
    "W2": "lr_mlp",
    "b2": "lr_mlp",
}


def init_model(mesh: ParametricMesh, view_ids, reference_view: int, config: TrainConfig) -> CoinModel:
    rng = np.random.default_rng(config.seed)
    binding = init_on_mesh(mesh, config.n_per_face, rng_seed=config.seed)
    n = len(binding)
    frames = MeshFrames.of(mesh)
    canonical, _, _ = realize_geometry(binding, frames)
    normed, center, half = normalize_positions(canonical)
    mlp = InconsistencyMLP(config.embed_dim + 3 + 6 * config.pos_freqs, config.hidden_width, rng)
    emb = rng.normal(0.0, config.embedding_init_std, (len(view_ids), config.embed_dim))
    return CoinModel(
        mesh=mesh,
        binding=binding,
        logit_opacities=np.full(n, float(logit(config.init_opacity))),
        colors=np.full((n, 3), float(config.init_color)),
        embeddings=emb,
        mlp=mlp,
        pos_embed=position_embedding(normed, config.pos_freqs),
        view_ids=[int(v) for v in view_ids],
        reference_view=int(reference_view),
        background=tuple(config.background),
        pos_center=center,
        pos_half_extent=half,
        _frames=frames,
    )


# --------------------------------------------------------------------------
# losses


@dataclass
class LossTerms:
    l_pixel: float
    l_struc: float
    l_reg: float
    mean_abs_offset: float
    psnr_c: float
    psnr_ic: float

    @property
    def total(self) -> float:
        return self.l_pixel + self.l_struc + self.l_reg


@dataclass
class LossResult:
    terms: LossTerms
    grads: dict
    term_grads: dict | None
    image_c: np.ndarray
    image_ic: np.ndarray
    offsets: np.ndarray


def _zero_grads(model: CoinModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.param_arrays().items()}


def _geometry_grads(model, raster, scene, screen, grads):
    buf = raster.backward_geometry(scene, screen)
    buf.check_finite()
    d_pos, d_rot, d_scale = realize_pullback(model.binding, model.frames, buf.means, buf.quats, buf.log_scales)
    grads["local_position"] += d_pos
    grads["local_rotation"] += d_rot
    grads["relative_log_scale"] += d_scale
    grads["logit_opacities"] += buf.logit_opacities
    return buf


def _clip(c):
    return np.clip(c, 0.0, 1.0), ((c >= 0.0) & (c <= 1.0)).astype(np.float64)


def pixel_loss_grad(image, target, config: TrainConfig):
    v1, g1 = l1_grad(image, target)
    v2, g2 = dssim_grad(image, target)
    return config.lambda_l1 * v1 + config.lambda_ssim * v2, config.lambda_l1 * g1 + config.lambda_ssim * g2


def base_losses(model: CoinModel, cam: Camera, target, config: TrainConfig) -> LossResult:
    """Pixel losses on the base render only (warm-up phase and the no-COIN baseline)."""
    scene = model.scene()
    raster = Rasterizer.prepare(scene, cam)
    c_clip, inside = _clip(model.colors)
    out = raster.forward(c_clip, config.background)
    value, g_img = pixel_loss_grad(out.color, target, config)
    grads = _zero_grads(model)
    screen = raster.backward_screen(out, g_img)
    _geometry_grads(model, raster, scene, screen, grads)
    grads["colors"] += screen[:, 6:9] * inside
    p = psnr(out.color, target)
    terms = LossTerms(value, 0.0, 0.0, 0.0, p, p)
    return LossResult(terms, grads, None, out.color, out.color, np.zeros_like(model.colors))


def coin_losses(model: CoinModel, view_id: int, cam: Camera, target, config: TrainConfig,
                per_term: bool = False) -> LossResult:
    """All three COIN losses for one view, with gradients.

    Gradient routing: the pixel loss reaches geometry, base colors, MLP and the
    view embedding; the structure loss sees only the base render and so only
    geometry and base colors; the offset penalty reaches the MLP and the view
    embedding. With ``per_term`` each loss's gradient is also returned alone.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cam.height, cam.width, 3):
        raise ValueError(f"target is {target.shape}, camera expects {(cam.height, cam.width, 3)}")
    vi = model.view_index(view_id)
    e_view = model.embeddings[vi]
    x = mlp_input(e_view, model.colors, model.pos_embed)
    offsets, cache = model.mlp.forward(x)
    c_star = combined_color(model.colors, offsets)

    scene = model.scene()
    raster = Rasterizer.prepare(scene, cam)
    c_clip, c_inside = _clip(model.colors)
    out_c = raster.forward(c_clip, config.background)
    zero_offsets = not np.any(offsets)
    if zero_offsets:
        out_ic, cs_clip, cs_inside = out_c, c_clip, c_inside
    else:
        cs_clip, cs_inside = _clip(c_star)
        out_ic = raster.forward(cs_clip, config.background)

    l_pix, g_pix_img = pixel_loss_grad(out_ic.color, target, config)
    s_val, s_grad = get_structure_loss(config.structure_loss)(out_c.color, target)
    l_struc, g_struc_img = config.lambda_lpips * s_val, config.lambda_lpips * s_grad
    mean_abs = float(np.mean(np.abs(offsets)))
    l_reg = config.lambda_offset * mean_abs
    g_reg_off = config.lambda_offset * np.sign(offsets) / offsets.size

    term = {k: _zero_grads(model) for k in ("pixel", "struc", "reg")}

    # pixel loss through the combined render
    screen_pix = raster.backward_screen(out_ic, g_pix_img)
    _geometry_grads(model, raster, scene, screen_pix, term["pixel"])
    g_cstar = screen_pix[:, 6:9] * cs_inside
    mlp_g, g_x = model.mlp.backward(cache, g_cstar)
    d = config.embed_dim
    term["pixel"]["colors"] += g_cstar + g_x[:, d:d + 3]
    term["pixel"]["embeddings"][vi] += g_x[:, :d].sum(axis=0)
    for k, v in mlp_g.items():
        term["pixel"][k] += v

    # structure loss through the base render
    screen_struc = raster.backward_screen(out_c, g_struc_img)
    _geometry_grads(model, raster, scene, screen_struc, term["struc"])
    term["struc"]["colors"] += screen_struc[:, 6:9] * c_inside

    # offset penalty: MLP weights and view embedding only
    mlp_g, g_x = model.mlp.backward(cache, g_reg_off)
    term["reg"]["embeddings"][vi] += g_x[:, :d].sum(axis=0)
    for k, v in mlp_g.items():
        term["reg"][k] += v

    grads = {k: term["pixel"][k] + term["struc"][k] + term["reg"][k] for k in term["pixel"]}
    terms = LossTerms(l_pix, l_struc, l_reg, mean_abs, psnr(out_c.color, target), psnr(out_ic.color, target))
    for name, value in (("L_pixel", l_pix), ("L_struc", l_struc), ("L_reg", l_reg)):
        if not math.isfinite(value):
            raise TrainingError(f"{name} is not finite for view {view_id}")
    return LossResult(terms, grads, term if per_term else None, out_c.color, out_ic.color, offsets)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lrs[k] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict:
        out = {"adam_step": np.array([self.step_count], dtype=np.int64)}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.step_count = int(arrays["adam_step"][0])
        for k in self.m:
            self.m[k][...] = arrays[f"adam_m/{k}"]
            self.v[k][...] = arrays[f"adam_v/{k}"]


def learning_rates(config: TrainConfig, iteration: int) -> dict:
    """Per-parameter learning rates; positions decay exponentially within each phase."""
    p1 = int(config.phase1_iters)
    if iteration < p1:
        start, length = 0, p1
    else:
        start, length = p1, int(config.phase2_iters)
    frac = (iteration - start) / max(length - 1, 1)
    lrs = {k: float(getattr(config, g)) for k, g in PARAM_GROUPS.items()}
    lrs["local_position"] = config.lr_position * config.lr_position_final_ratio ** min(max(frac, 0.0), 1.0)
    return lrs


def view_schedule(seed: int, iteration: int, n_views: int) -> int:
    """Index of the view used at ``iteration``: a fresh permutation every epoch."""
    epoch, k = divmod(iteration, n_views)
    return int(np.random.default_rng([seed, epoch]).permutation(n_views)[k])


# --------------------------------------------------------------------------
# training


@dataclass
class LossReport:
    iteration: int
    phase: int
    view: int
    l_pixel: float
    l_struc: float
    l_reg: float
    total: float
    mean_abs_offset: float
    psnr_c: float
    psnr_ic: float

    FIELDS = ("iteration", "phase", "view", "l_pixel", "l_struc", "l_reg", "total", "mean_abs_offset",
              "psnr_c", "psnr_ic")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def validate_dataset(dataset: ViewDataset) -> None:
    if dataset is None or len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if len(dataset) < 2:
        raise ConfigurationError("training needs at least two views")
    try:
        dataset.validate()
    except DatasetError as exc:
        raise ConfigurationError(str(exc)) from None


def default_mesh(dataset: ViewDataset) -> ParametricMesh:
    """Fallback host mesh when a dataset ships none: a sphere at the orbit target."""
    v, f = icosphere(3, 0.6)
    return ParametricMesh(v, f)


@dataclass
class TrainState:
    model: CoinModel
    optimizer: Adam
    iteration: int
    config: TrainConfig


def train(dataset: ViewDataset, config: TrainConfig | None = None, mesh: ParametricMesh | None = None,
          resume: TrainState | None = None, checkpoint_dir=None, stop_at: int | None = None,
          callback=None):
    """Run both phases; returns ``(CoinModel, list[LossReport])``.

    Phase 1 fits the base model alone with pixel losses. Phase 2 trains the
    full COIN objective (or, in ``baseline`` mode, keeps the phase-1 losses).
    ``stop_at`` ends early after that many iterations, leaving a resumable
    state in ``train.last_state``.
    """
    config = config or TrainConfig()
    validate_dataset(dataset)
    if resume is not None:
        model, opt, start = resume.model, resume.optimizer, resume.iteration
    else:
        mesh = mesh if mesh is not None else default_mesh(dataset)
        model = init_model(mesh, dataset.view_ids, dataset.reference_view, config)
        opt = Adam(model.param_arrays(), config.beta1, config.beta2, config.adam_eps)
        start = 0
    if list(model.view_ids) != list(dataset.view_ids):
        raise ConfigurationError("model views do not match the dataset")

    targets = [np.asarray(img, dtype=np.float64) for img in dataset.images]
    history = []
    total = config.total_iters if stop_at is None else min(config.total_iters, int(stop_at))
    p1 = int(config.phase1_iters)
    params = model.param_arrays()
    for it in range(start, total):
        vi = view_schedule(config.seed, it, len(dataset))
        cam, target, vid = dataset.cameras[vi], targets[vi], dataset.view_ids[vi]
        phase = 1 if it < p1 else 2
        if phase == 1 or config.mode == "baseline":
            res = base_losses(model, cam, target, config)
        else:
            res = coin_losses(model, vid, cam, target, config)
        t = res.terms
        if not math.isfinite(t.total):
            raise TrainingError(f"non-finite loss at iteration {it} (view {vid})")
        for k, g in res.grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {k} at iteration {it} (view {vid})")
        opt.step(params, res.grads, learning_rates(config, it))
        q = model.binding.local_rotation
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        np.clip(model.colors, 0.0, 1.0, out=model.colors)

        done = it + 1
        if config.log_every and (done % config.log_every == 0 or done == config.total_iters):
            rep = LossReport(done, phase, vid, t.l_pixel, t.l_struc, t.l_reg, t.total, t.mean_abs_offset,
                             t.psnr_c, t.psnr_ic)
            history.append(rep)
            if callback is not None:
                callback(rep)
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{done:06d}.bin", model, opt, done, config)
    train.last_state = TrainState(model, opt, total, config)
    return model, history


train.last_state = None


def infer(model: CoinModel, cam: Camera, view_mode: str = "consistent", view_id: int | None = None,
          background=None) -> RenderOutput:
    """Render with base colors (``consistent``) or with a view's offsets (``reference_embedding``).

    ``reference_embedding`` uses the reference view's embedding unless
    ``view_id`` names another training view.
    """
    bg = model.background if background is None else background
    scene = model.scene()
    raster = Rasterizer.prepare(scene, cam)
    if view_mode == "consistent":
        colors = model.colors
    elif view_mode in ("reference_embedding", "reference"):
        vid = model.reference_view if view_id is None else view_id
        colors = combined_color(model.colors, model.offsets(vid))
    else:
        raise ValueError(f"unknown view mode {view_mode!r}; use 'consistent' or 'reference_embedding'")
    return raster.forward(np.clip(colors, 0.0, 1.0), bg)


# --------------------------------------------------------------------------
# checkpoints


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(path, model: CoinModel, optimizer: Adam | None = None, iteration: int = 0,
                    config: TrainConfig | None = None) -> Path:
    meta = {
        "iteration": int(iteration),
        "view_ids": list(model.view_ids),
        "reference_view": int(model.reference_view),
        "background": list(model.background),
        "pos_half_extent": model.pos_half_extent,
        "mlp_in": model.mlp.in_dim,
        "mlp_hidden": model.mlp.hidden,
        "config": config.to_dict() if config is not None else None,
    }
    arrays = {
        "meta": _meta_array(meta),
        "mesh/vertices": model.mesh.vertices,
        "mesh/faces": model.mesh.faces,
        "mesh/blendshapes": model.mesh.blendshapes,
        "mesh/weights": model.mesh.weights,
        "binding/tri_index": model.binding.tri_index,
        "binding/local_position": model.binding.local_position,
        "binding/local_rotation": model.binding.local_rotation,
        "binding/relative_log_scale": model.binding.relative_log_scale,
        "logit_opacities": model.logit_opacities,
        "colors": model.colors,
        "pos_embed": model.pos_embed,
        "pos_center": model.pos_center,
        "embeddings": model.embeddings,
    }
    for k, v in model.mlp.params.items():
        arrays[f"mlp/{k}"] = v
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_blob(path, arrays)
    return path


def load_checkpoint(path) -> TrainState:
    a = read_blob(path)
    meta = json.loads(a["meta"].tobytes().decode())
    mesh = ParametricMesh(a["mesh/vertices"], a["mesh/faces"], a["mesh/blendshapes"], a["mesh/weights"])
    binding = TriangleBinding(a["binding/tri_index"], a["binding/local_position"], a["binding/local_rotation"],
                              a["binding/relative_log_scale"])
    mlp = InconsistencyMLP(meta["mlp_in"], meta["mlp_hidden"],
                           params={k: a[f"mlp/{k}"] for k in InconsistencyMLP.PARAMS})
    model = CoinModel(
        mesh=mesh,
        binding=binding,
        logit_opacities=a["logit_opacities"],
        colors=a["colors"],
        embeddings=a["embeddings"],
        mlp=mlp,
        pos_embed=a["pos_embed"],
        view_ids=meta["view_ids"],
        reference_view=meta["reference_view"],
        background=tuple(meta["background"]),
        pos_center=a["pos_center"],
        pos_half_extent=meta["pos_half_extent"],
    )
    config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    opt = Adam(model.param_arrays(), config.beta1, config.beta2, config.adam_eps)
    if "adam_step" in a:
        opt.load_state_arrays(a)
    return TrainState(model, opt, int(meta["iteration"]), config)
