"""Photometric, depth and scale-regularization losses with their gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated only where the window
fits inside the image ("valid" mode), per channel, averaged over the map.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene import DEPTH_SENTINEL

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_image_mix: float = 0.2
    lambda_depth: float = 0.01
    lambda_pose: float = 1.0
    eps_pose: float = 1e-2

    def __post_init__(self):
        if min(self.lambda_image_mix, self.lambda_depth, self.lambda_pose, self.eps_pose) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_image_mix > 1:
            raise ValueError("lambda_image_mix must lie in [0, 1]")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _as3d(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    y = correlate1d(x, w, axis=0, mode="constant")
    y = correlate1d(y, w, axis=1, mode="constant")
    return y[r:-r, r:-r]


def _filter_valid_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    pad = np.pad(g, ((r, r), (r, r), (0, 0)))
    y = correlate1d(pad, w[::-1], axis=0, mode="constant")
    return correlate1d(y, w[::-1], axis=1, mode="constant")


def ssim_and_grad(a, b, need_grad: bool = True):
    """Mean SSIM of ``a`` vs ``b`` and (optionally) its gradient w.r.t. ``a``."""
    a, b = _as3d(a), _as3d(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    e_aa = _filter_valid(a * a, w)
    e_bb = _filter_valid(b * b, w)
    e_ab = _filter_valid(a * b, w)
    s_aa = e_aa - mu_a**2
    s_bb = e_bb - mu_b**2
    s_ab = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * s_ab + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = s_aa + s_bb + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not need_grad:
        return value, None
    inv_n = 1.0 / S.size
    g_eab = 2 * A1 / (B1 * B2) * inv_n
    g_eaa = -S / B2 * inv_n
    g_mu = (2 * mu_b * (A2 - A1) / (B1 * B2) - 2 * mu_a * S * (1 / B1 - 1 / B2)) * inv_n
    grad = (_filter_valid_adjoint(g_mu, w) + 2 * a * _filter_valid_adjoint(g_eaa, w)
            + b * _filter_valid_adjoint(g_eab, w))
    return value, grad


def ssim(a, b) -> float:
    return ssim_and_grad(a, b, need_grad=False)[0]


def image_loss_and_grad(pred, target, lam: float = 0.2):
    pred, target = _as3d(pred), _as3d(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    s, g_s = ssim_and_grad(pred, target)
    value = lam * l1 + (1 - lam) * (1 - s) / 2
    grad = lam * np.sign(diff) / diff.size - (1 - lam) / 2 * g_s
    return value, grad


def loss_image(pred, target, lam: float = 0.2) -> float:
    return image_loss_and_grad(pred, target, lam)[0]


def depth_loss_and_grad(pred, ref):
    """Mean absolute depth error over pixels valid in both maps; returns (value, grad, n_valid)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    valid = (pred != DEPTH_SENTINEL) & (ref != DEPTH_SENTINEL)
    n = int(valid.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad, 0
    diff = np.where(valid, pred - ref, 0.0)
    grad[valid] = np.sign(diff[valid]) / n
    return float(np.abs(diff).sum() / n), grad, n


def loss_depth(pred, ref) -> float:
    value, _, n = depth_loss_and_grad(pred, ref)
    if n == 0:
        warnings.warn("depth loss has no valid pixels; returning 0", RuntimeWarning, stacklevel=2)
    return value


def pose_reg_and_grad(log_scales: np.ndarray, eps_pose: float):
    """Mean over Gaussians of ||max(s, eps)||_2; gradient is w.r.t. log-scales."""
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    if len(s) == 0:
        return 0.0, np.zeros_like(s)
    m = np.maximum(s, eps_pose)
    norms = np.linalg.norm(m, axis=1)
    value = float(norms.mean())
    grad = np.where(s > eps_pose, m / norms[:, None], 0.0) * s / len(s)
    return value, grad


def loss_pose_reg(cloud_or_log_scales, eps_pose: float = 1e-2) -> float:
    log_scales = getattr(cloud_or_log_scales, "log_scales", cloud_or_log_scales)
    return pose_reg_and_grad(log_scales, eps_pose)[0]


def total_loss(l_image: float, l_depth: float, l_pose: float, weights: LossWeights = LossWeights()) -> float:
    for name, v in (("l_image", l_image), ("l_depth", l_depth), ("l_pose", l_pose)):
        if not math.isfinite(v):
            raise FloatingPointError(f"loss component {name} is not finite ({v})")
    return l_image + weights.lambda_depth * l_depth + weights.lambda_pose * l_pose


def psnr(a, b, cap: float = 99.0) -> float:
    """PSNR in dB for [0, 1] images; identical images report ``cap``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))
