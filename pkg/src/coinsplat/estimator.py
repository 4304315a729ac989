"""scikit-learn style wrapper around COIN training.

``X`` is a sequence of cameras and ``y`` the matching images; ``predict``
renders cameras with the consistent base model and ``score`` is mean PSNR.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .camera import Camera
from .coin import TrainConfig, infer, train
from .dataset import ViewDataset, check_camera, check_image
from .losses import psnr


def check_cameras(X) -> list:
    """Validate a non-empty sequence of cameras."""
    if isinstance(X, Camera):
        X = [X]
    cams = [check_camera(c) for c in X]
    if not cams:
        raise ValueError("expected at least one camera")
    return cams


def check_images(y, cameras) -> list:
    """Validate images against camera resolutions; returns float64 arrays."""
    images = list(y)
    if len(images) != len(cameras):
        raise ValueError(f"got {len(images)} images for {len(cameras)} cameras")
    return [check_image(img, (c.height, c.width), f"image {k}") for k, (img, c) in enumerate(zip(images, cameras))]


def check_is_fitted(est) -> None:
    if getattr(est, "model_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class CoinReconstructor(BaseEstimator):
    """Fit a mesh-bound Gaussian model with per-view inconsistency offsets.

    Constructor arguments mirror :class:`TrainConfig` fields (only the ones
    worth tuning are exposed); ``mesh`` is the parametric mesh the Gaussians
    bind to, defaulting to a sphere sized from the camera rig.
    """

    def __init__(self, mesh=None, mode="coin", phase1_iters=2000, phase2_iters=6000, lambda_l1=0.8,
                 lambda_ssim=0.2, lambda_lpips=0.05, lambda_offset=1.0, n_per_face=1, embed_dim=16,
                 hidden_width=64, pos_freqs=4, reference_view=0, background=(0.0, 0.0, 0.0), seed=0):
        self.mesh = mesh
        self.mode = mode
        self.phase1_iters = phase1_iters
        self.phase2_iters = phase2_iters
        self.lambda_l1 = lambda_l1
        self.lambda_ssim = lambda_ssim
        self.lambda_lpips = lambda_lpips
        self.lambda_offset = lambda_offset
        self.n_per_face = n_per_face
        self.embed_dim = embed_dim
        self.hidden_width = hidden_width
        self.pos_freqs = pos_freqs
        self.reference_view = reference_view
        self.background = background
        self.seed = seed

    def _config(self) -> TrainConfig:
        params = self.get_params()
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in params.items() if k in fields})

    def fit(self, X, y, view_ids=None):
        cams = check_cameras(X)
        images = check_images(y, cams)
        ids = list(range(len(cams))) if view_ids is None else [int(v) for v in view_ids]
        dataset = ViewDataset(cams, images, None, self.reference_view, ids)
        self.model_, self.history_ = train(dataset, self._config(), mesh=self.mesh)
        self.n_views_ = len(cams)
        return self

    def predict(self, X, view_mode="consistent"):
        """Render every camera; returns an (n, H, W, 3) array when resolutions agree, else a list."""
        check_is_fitted(self)
        cams = check_cameras(X)
        out = [np.clip(infer(self.model_, c, view_mode).color, 0.0, 1.0) for c in cams]
        if len({o.shape for o in out}) == 1:
            return np.stack(out)
        return out

    def score(self, X, y):
        """Mean PSNR in dB of the consistent render against ``y``."""
        cams = check_cameras(X)
        images = check_images(y, cams)
        preds = self.predict(cams)
        return float(np.mean([psnr(p, t) for p, t in zip(preds, images)]))
