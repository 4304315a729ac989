"""Image losses with analytic gradients.

Every ``*_grad`` function returns ``(value, d value / d a)`` where ``a`` is the
first (predicted) image. Images are float arrays shaped (H, W, 3).
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def l1(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b):
    a, b = _check_pair(a, b)
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def psnr(a, b, max_db: float = 99.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return max_db
    return min(max_db, -10.0 * np.log10(mse))


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(x, w):
    """Separable valid-mode correlation over the two leading axes."""
    k = len(w)
    y = sliding_window_view(x, k, axis=0) @ w
    return sliding_window_view(y, k, axis=1) @ w


def _filter_valid_adjoint(y, w):
    """Adjoint of ``_filter_valid`` (a full convolution)."""
    k = len(w)
    pad = [(k - 1, k - 1), (0, 0)] + [(0, 0)] * (y.ndim - 2)
    x = sliding_window_view(np.pad(y, pad), k, axis=0) @ w[::-1]
    pad = [(0, 0), (k - 1, k - 1)] + [(0, 0)] * (y.ndim - 2)
    return sliding_window_view(np.pad(x, pad), k, axis=1) @ w[::-1]


def _ssim_parts(a, b, window):
    w = gaussian_window(window)
    C1 = (SSIM_K1 * 1.0) ** 2
    C2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    m_aa = _filter_valid(a * a, w)
    m_bb = _filter_valid(b * b, w)
    m_ab = _filter_valid(a * b, w)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov_ab = m_ab - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + C1
    A2 = 2.0 * cov_ab + C2
    B1 = mu_a * mu_a + mu_b * mu_b + C1
    B2 = var_a + var_b + C2
    S = (A1 * A2) / (B1 * B2)
    return w, mu_a, mu_b, A1, A2, B1, B2, S


def _check_ssim_input(a, b, window):
    a, b = _check_pair(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window} for SSIM, got {a.shape[:2]}")
    return a, b


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over channels and valid window positions (dynamic range 1)."""
    a, b = _check_ssim_input(a, b, window)
    return float(np.mean(_ssim_parts(a, b, window)[-1]))


def ssim_grad(a, b, window: int = SSIM_WINDOW):
    a, b = _check_ssim_input(a, b, window)
    w, mu_a, mu_b, A1, A2, B1, B2, S = _ssim_parts(a, b, window)
    g = 1.0 / S.size
    denom = B1 * B2
    d_mab = g * 2.0 * A1 / denom
    d_maa = -g * S / B2
    d_mu = g * (2.0 * mu_b * (A2 - A1) / denom - 2.0 * mu_a * S * (1.0 / B1 - 1.0 / B2))
    grad = (_filter_valid_adjoint(d_mu, w) + 2.0 * a * _filter_valid_adjoint(d_maa, w)
            + b * _filter_valid_adjoint(d_mab, w))
    return float(np.mean(S)), grad


def dssim_grad(a, b):
    """1 - SSIM and its gradient."""
    v, g = ssim_grad(a, b)
    return 1.0 - v, -g


# --------------------------------------------------------------------------
# perceptual proxy


def _pool(x, f):
    h, w = (x.shape[0] // f) * f, (x.shape[1] // f) * f
    xc = x[:h, :w]
    return xc.reshape(h // f, f, w // f, f, -1).mean(axis=(1, 3))


def pyramid_l1_grad(a, b, levels=(2, 4)):
    """Patch-averaged L1 over downsampling factors, averaged over levels.

    Tolerant to sub-patch misalignment and blur while still penalizing
    structural differences; stands in for a learned perceptual metric.
    """
    a, b = _check_pair(a, b)
    total = 0.0
    grad = np.zeros_like(a)
    for f in levels:
        d = _pool(a, f) - _pool(b, f)
        total += np.mean(np.abs(d))
        g = np.sign(d) / d.size / (f * f)
        h, w = d.shape[0] * f, d.shape[1] * f
        grad[:h, :w] += np.repeat(np.repeat(g, f, axis=0), f, axis=1)
    n = len(levels)
    return total / n, grad / n


def pyramid_l1(a, b, levels=(2, 4)) -> float:
    return float(pyramid_l1_grad(a, b, levels)[0])


StructureLoss = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]

STRUCTURE_LOSSES: dict[str, StructureLoss] = {"pyramid": pyramid_l1_grad}


def register_structure_loss(name: str, fn: StructureLoss) -> None:
    """Make a (value, grad) image loss available as ``TrainConfig.structure_loss``."""
    STRUCTURE_LOSSES[name] = fn


def get_structure_loss(name: str) -> StructureLoss:
    try:
        return STRUCTURE_LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown structure loss {name!r}; available: {sorted(STRUCTURE_LOSSES)}") from None
