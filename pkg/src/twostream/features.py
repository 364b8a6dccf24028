"""Low-level spatiotemporal feature time courses.

Per frame: mean pixel intensity over all pixels and channels, and
luminance contrast as the population standard deviation of the
grayscale frame. Per consecutive pair: mean absolute pixel change, and
dense optical flow summarized as mean vector magnitude plus the circular
mean of flow angles.

Flow comes from a native dense estimator in the Farneback style: each
pyramid level fits a local quadratic polynomial to both images through
Gaussian-weighted least squares, then iteratively solves for the
displacement that aligns the two expansions, averaging the normal
equations over a box window.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernels import correlate1d, gaussian_kernel1d, resize_bilinear
from .video import VideoTensor

GRAY_VECTOR = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class FeatureError(ValueError):
    """Raised for invalid inputs to the feature computations."""


@dataclass(frozen=True)
class FarnebackParams:
    pyramid_scale: float = 0.5
    levels: int = 5
    window_size: int = 13
    iterations: int = 10
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not (0 < self.pyramid_scale < 1):
            raise FeatureError("pyramid scale must be in (0, 1)")
        if self.levels < 1 or self.iterations < 1:
            raise FeatureError("levels and iterations must be positive")
        if self.poly_n % 2 == 0 or self.window_size % 2 == 0:
            raise FeatureError("window sizes must be odd")


@dataclass
class FeatureSeries:
    """Per-frame and per-pair feature columns of one clip."""

    intensity: np.ndarray
    contrast: np.ndarray
    pixel_change: np.ndarray
    flow_magnitude: np.ndarray
    flow_angle: np.ndarray

    def __post_init__(self):
        t = len(self.intensity)
        if len(self.contrast) != t:
            raise FeatureError("intensity and contrast lengths differ")
        for name in ("pixel_change", "flow_magnitude", "flow_angle"):
            n = len(getattr(self, name))
            if t > 0 and n != t - 1:
                raise FeatureError(
                    f"{name} must have length T-1 ({t - 1}), got {n}")

    @property
    def n_frames(self) -> int:
        return len(self.intensity)


CSV_COLUMNS = ("frame", "intensity", "contrast", "pixel_change",
               "flow_magnitude", "flow_angle")


def write_feature_csv(series: FeatureSeries, path: str) -> None:
    """One row per frame; per-pair columns are blank on the first row.

    NaN values are written as the literal string ``nan``; LF endings and
    '.' decimal separators throughout.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for t in range(series.n_frames):
            row = [t, repr(float(series.intensity[t])), repr(float(series.contrast[t]))]
            if t == 0:
                row += ["", "", ""]
            else:
                row += [repr(float(series.pixel_change[t - 1])),
                        repr(float(series.flow_magnitude[t - 1])),
                        repr(float(series.flow_angle[t - 1]))]
            writer.writerow(row)


def grayscale(frame: np.ndarray) -> np.ndarray:
    """Luminance projection of an RGB frame with [0.299, 0.587, 0.114]."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise FeatureError(f"grayscale expects (H,W,3), got {f.shape}")
    return f @ GRAY_VECTOR


def spatial_features(video: VideoTensor) -> tuple[np.ndarray, np.ndarray]:
    """Mean intensity over H, W, C and population std of the grayscale frame."""
    frames = video.frames.astype(np.float64)
    intensity = frames.mean(axis=(1, 2, 3))
    if video.shape[3] == 3:
        gray = frames @ GRAY_VECTOR
    else:
        gray = frames[:, :, :, 0]
    contrast = gray.std(axis=(1, 2))
    return intensity, contrast


def circular_mean(angles: np.ndarray) -> float:
    """Mean direction in (-pi, pi]; 0 for an empty input."""
    if angles.size == 0:
        return 0.0
    s = np.sin(angles).mean()
    c = np.cos(angles).mean()
    a = math.atan2(s, c)
    return math.pi if a <= -math.pi else a


# ---------------------------------------------------------------------------
# Dense flow (Farneback-style polynomial expansion)
# ---------------------------------------------------------------------------

def _poly_expansion(img: np.ndarray, n: int, sigma: float):
    """Per-pixel quadratic fit f(x) ~ x^T A x + b^T x + c.

    Returns (A, b) with A as (H, W, 2, 2) and b as (H, W, 2); x is
    (dx, dy) with dx along columns. Weighted least squares with a
    Gaussian applicability over an n x n neighborhood, solved through a
    precomputed normal-equation inverse shared by every pixel.
    """
    r = n // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    w1d = np.exp(-0.5 * (t / sigma) ** 2)
    # basis: 1, dx, dy, dx^2, dy^2, dx*dy  evaluated on the grid
    yy, xx = np.meshgrid(t, t, indexing="ij")
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy])
    w2d = np.outer(w1d, w1d)
    g_mat = np.einsum("khw,lhw,hw->kl", basis, basis, w2d)
    g_inv = np.linalg.inv(g_mat)
    # moment images: correlate f with w * basis_k
    moments = [_correlate2d_full(img, w2d * basis[k]) for k in range(6)]
    m = np.stack(moments, axis=-1) @ g_inv.T  # (H, W, 6) coefficients r_k
    c0, bx, by, axx, ayy, axy = [m[:, :, i] for i in range(6)]
    a = np.empty(img.shape + (2, 2))
    a[:, :, 0, 0] = axx
    a[:, :, 1, 1] = ayy
    a[:, :, 0, 1] = axy / 2.0
    a[:, :, 1, 0] = axy / 2.0
    b = np.stack([bx, by], axis=-1)
    return a, b


def _correlate2d_full(img: np.ndarray, ker: np.ndarray) -> np.ndarray:
    """Size-preserving 2-d correlation with reflect borders (kernels here
    are tiny, so no separability is assumed)."""
    from numpy.lib.stride_tricks import sliding_window_view
    kh, kw = ker.shape
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="reflect")
    win = sliding_window_view(padded, (kh, kw))
    return np.einsum("hwuv,uv->hw", win, ker)


def _box_filter(img: np.ndarray, size: int) -> np.ndarray:
    k = np.full(size, 1.0 / size)
    return correlate1d(correlate1d(img, k, axis=0), k, axis=1)


def _warp_nearest(field: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample `field` at integer-rounded displaced positions, clamped."""
    h, w = field.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xi = np.clip(np.rint(xs + flow[:, :, 0]).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(ys + flow[:, :, 1]).astype(np.int64), 0, h - 1)
    return field[yi, xi]


def _flow_single_level(a1, b1, a2, b2, flow: np.ndarray, window: int,
                       iterations: int) -> np.ndarray:
    for _ in range(iterations):
        a2w = _warp_nearest(a2, flow)
        b2w = _warp_nearest(b2, flow)
        a_mid = 0.5 * (a1 + a2w)
        # delta_b = -0.5 (b2(x+d) - b1(x)) + A d
        ad = np.einsum("hwij,hwj->hwi", a_mid, flow)
        db = -0.5 * (b2w - b1) + ad
        # accumulate windowed normal equations G d = h
        g11 = _box_filter(a_mid[:, :, 0, 0] ** 2 + a_mid[:, :, 0, 1] ** 2, window)
        g12 = _box_filter(a_mid[:, :, 0, 0] * a_mid[:, :, 1, 0]
                          + a_mid[:, :, 0, 1] * a_mid[:, :, 1, 1], window)
        g22 = _box_filter(a_mid[:, :, 1, 0] ** 2 + a_mid[:, :, 1, 1] ** 2, window)
        h1 = _box_filter(a_mid[:, :, 0, 0] * db[:, :, 0]
                         + a_mid[:, :, 0, 1] * db[:, :, 1], window)
        h2 = _box_filter(a_mid[:, :, 1, 0] * db[:, :, 0]
                         + a_mid[:, :, 1, 1] * db[:, :, 1], window)
        det = g11 * g22 - g12 * g12
        det = np.where(np.abs(det) < 1e-9, 1e-9, det)
        u = (g22 * h1 - g12 * h2) / det
        v = (g11 * h2 - g12 * h1) / det
        flow = np.stack([u, v], axis=-1)
    return flow


def dense_flow(prev_gray: np.ndarray, cur_gray: np.ndarray,
               params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Dense displacement field (H, W, 2) mapping prev -> cur, (dx, dy)."""
    if prev_gray.shape != cur_gray.shape:
        raise FeatureError("frame pair shapes differ")
    h, w = prev_gray.shape
    levels = params.levels
    if min(h, w) < 2 ** levels:
        levels = max(1, int(math.floor(math.log2(min(h, w)))) - 1)
        warnings.warn(
            f"frame {h}x{w} too small for {params.levels} pyramid levels; "
            f"using {levels}", stacklevel=2)
    # build pyramids, coarsest last
    smooth_k = gaussian_kernel1d(1.0)
    pyr1, pyr2 = [prev_gray.astype(np.float64)], [cur_gray.astype(np.float64)]
    for _ in range(levels - 1):
        def down(img):
            sm = correlate1d(correlate1d(img, smooth_k, axis=0), smooth_k, axis=1)
            hh = max(2, int(round(img.shape[0] * params.pyramid_scale)))
            ww = max(2, int(round(img.shape[1] * params.pyramid_scale)))
            return resize_bilinear(sm.astype(np.float32), (hh, ww)).astype(np.float64)
        pyr1.append(down(pyr1[-1]))
        pyr2.append(down(pyr2[-1]))
    flow = np.zeros(pyr1[-1].shape + (2,))
    inv_scale = 1.0 / params.pyramid_scale
    for lev in range(levels - 1, -1, -1):
        img1, img2 = pyr1[lev], pyr2[lev]
        if lev < levels - 1:
            flow = resize_bilinear(flow.astype(np.float32),
                                   img1.shape[:2]).astype(np.float64) * inv_scale
        a1, b1 = _poly_expansion(img1, params.poly_n, params.poly_sigma)
        a2, b2 = _poly_expansion(img2, params.poly_n, params.poly_sigma)
        window = min(params.window_size, max(3, (min(img1.shape) // 2) * 2 - 1))
        flow = _flow_single_level(a1, b1, a2, b2, flow, window, params.iterations)
    return flow


def temporal_features(video: VideoTensor,
                      params: FarnebackParams = FarnebackParams()):
    """Pixel change plus mean flow magnitude and circular-mean flow angle."""
    t = video.shape[0]
    if t < 2:
        raise FeatureError("temporal features need at least 2 frames")
    frames = video.frames.astype(np.float64)
    pixel_change = np.abs(np.diff(frames, axis=0)).mean(axis=(1, 2, 3))
    if video.shape[3] == 3:
        grays = frames @ GRAY_VECTOR
    else:
        grays = frames[:, :, :, 0]
    mags = np.empty(t - 1)
    angles = np.empty(t - 1)
    for i in range(t - 1):
        flow = dense_flow(grays[i], grays[i + 1], params)
        mags[i] = np.sqrt((flow ** 2).sum(axis=2)).mean()
        angles[i] = circular_mean(np.arctan2(flow[:, :, 1], flow[:, :, 0]))
    return pixel_change, mags, angles


def analyze_video(video: VideoTensor,
                  params: FarnebackParams = FarnebackParams()) -> FeatureSeries:
    intensity, contrast = spatial_features(video)
    if video.shape[0] >= 2:
        pixel_change, mags, angles = temporal_features(video, params)
    else:
        pixel_change = np.zeros(0)
        mags = np.zeros(0)
        angles = np.zeros(0)
    return FeatureSeries(intensity=intensity, contrast=contrast,
                         pixel_change=pixel_change, flow_magnitude=mags,
                         flow_angle=angles)
