"""Representation and image similarity metrics.

* linear CKA over (samples, features) activation matrices, column-centered
* SSIM with an 11x11 sigma=1.5 Gaussian window on grayscale, L=1,
  stability constants (0.01)^2 and (0.03)^2, valid-window average
* conditional SSIM, discounting predictions that copy the previous frame:
  (1 - SSIM(prev, prediction)) * SSIM(current, prediction)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import grayscale
from .kernels import correlate1d, gaussian_kernel1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    """Raised for invalid metric inputs."""


@dataclass(frozen=True)
class ActivationMatrix:
    """(samples, features) float32 activations with a provenance label."""

    data: np.ndarray
    source: str = ""

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] < 2:
            raise MetricError(
                f"activation matrix must be (n>=2, d), got shape {d.shape}")
        if not np.isfinite(d).all():
            raise MetricError("activation matrix contains non-finite values")
        object.__setattr__(self, "data", d)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """||Y_c^T X_c||_F^2 / (||X_c^T X_c||_F ||Y_c^T Y_c||_F), columns centered."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise MetricError("linear_cka expects 2-d matrices")
    if x.shape[0] != y.shape[0]:
        raise MetricError(
            f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    nx = np.linalg.norm(xc.T @ xc, "fro")
    ny = np.linalg.norm(yc.T @ yc, "fro")
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(cross / (nx * ny))


def _ssim_stats(img: np.ndarray) -> tuple:
    k = gaussian_kernel1d(SSIM_SIGMA, radius=SSIM_WINDOW // 2)
    mu = correlate1d(correlate1d(img, k, axis=0, mode="valid"), k, axis=1, mode="valid")
    sq = correlate1d(correlate1d(img * img, k, axis=0, mode="valid"), k, axis=1,
                     mode="valid")
    return mu, sq


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM between two frames in [0, 1] (grayscaled if RGB)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[2] == 3:
        a, b = grayscale(a), grayscale(b)
    elif a.ndim == 3:
        a, b = a[:, :, 0], b[:, :, 0]
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(
            f"frames must be at least {SSIM_WINDOW}px per side, got {a.shape}")
    k = gaussian_kernel1d(SSIM_SIGMA, radius=SSIM_WINDOW // 2)

    def smooth(img):
        return correlate1d(correlate1d(img, k, axis=0, mode="valid"), k, axis=1,
                           mode="valid")

    mu_a, mu_b = smooth(a), smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def cssim(f_t: np.ndarray, f_prev: np.ndarray, f_hat: np.ndarray) -> float:
    """(1 - SSIM(prev, prediction)) * SSIM(current, prediction)."""
    return (1.0 - ssim(f_prev, f_hat)) * ssim(f_t, f_hat)
