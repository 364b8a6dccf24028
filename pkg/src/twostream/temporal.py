"""Frame-pair motion stream: multiscale oriented energy over two frames.

The pipeline per scale: grayscale both frames, stack them as a 2-channel
volume, correlate with an oriented spatiotemporal filter bank, square to
an energy, divisively normalize across orientations, and bilinearly
upsample back to the finest scale. The per-scale maps concatenate into
one activation matrix whose Gram statistics drive the temporal texture
objective.

Filters are zero-mean, unit-norm Gaussian-derivative kernels built from a
directional spacetime derivative: a first derivative along (a, b, c) in
(x, y, t) combines spatial derivative kernels under temporal averaging
[1/2, 1/2] with a temporal difference [-1, +1]. The default bank covers
static structure (Laplacian), the four cardinal motion directions and
pure flicker; 8 orientations add the two diagonals. Learned kernels can
replace the analytic bank via the archive entry ``msoe.filters`` with
shape [K, 2, kh, kw] (temporal index 0 = previous frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .archive import ArchiveError, TensorArchive
from .spatial import ActivationMap

GRAY_COEFFS = (0.299, 0.587, 0.114)


class TemporalStreamError(ValueError):
    """Raised for invalid filter banks or mismatched frame pairs."""


@dataclass(frozen=True)
class TemporalNetwork:
    filters: np.ndarray      # (K, 2, kh, kw)
    n_scales: int
    epsilon: float

    def __post_init__(self):
        f = np.asarray(self.filters, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 2:
            raise TemporalStreamError(
                f"filter bank must be [K,2,kh,kw], got {f.shape}")
        if f.shape[0] < 2:
            raise TemporalStreamError("need at least 2 orientations")
        if self.n_scales < 1:
            raise TemporalStreamError("need at least 1 scale")
        if not (self.epsilon > 0):
            raise TemporalStreamError("normalization epsilon must be positive")
        object.__setattr__(self, "filters", np.ascontiguousarray(f))

    @property
    def n_orientations(self) -> int:
        return self.filters.shape[0]


def _gauss_parts(k_h: int, k_w: int, sigma: float):
    ys = np.arange(k_h, dtype=np.float64) - (k_h - 1) / 2.0
    xs = np.arange(k_w, dtype=np.float64) - (k_w - 1) / 2.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    g = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    gx = -xx / sigma ** 2 * g
    gy = -yy / sigma ** 2 * g
    log = ((xx ** 2 + yy ** 2) / sigma ** 4 - 2.0 / sigma ** 2) * g
    return g, gx, gy, log


def build_analytic_filterbank(n_orientations: int = 6, k_h: int = 11, k_w: int = 11,
                              sigma: float = 1.0) -> np.ndarray:
    """Zero-mean, L2-normalized oriented spacetime kernels [K, 2, kh, kw].

    Kernels are applied as cross-correlations downstream, so the motion
    selectivity pairs the spatial derivative with a *positive* temporal
    difference: (gx * avg + g * diff) nulls leftward drift and responds
    maximally to rightward drift.
    """
    if n_orientations not in (6, 8):
        raise TemporalStreamError("supported orientation counts are 6 and 8")
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise TemporalStreamError(f"kernel dims must be odd, got {k_h}x{k_w}")
    g, gx, gy, log = _gauss_parts(k_h, k_w, sigma)
    m = np.array([0.5, 0.5])    # temporal average  (prev, current)
    d = np.array([-1.0, 1.0])   # temporal difference

    def st(spatial, temporal):
        return np.einsum("hw,t->thw", spatial, temporal)

    inv = 1.0 / np.sqrt(2.0)
    rightward = (st(gx, m) + st(g, d)) * inv
    downward = (st(gy, m) + st(g, d)) * inv
    bank = [
        st(log, m),                 # static structure
        rightward,
        rightward[:, :, ::-1],      # leftward: mirror across the horizontal axis
        downward,
        downward[:, ::-1, :],       # upward: mirror across the vertical axis
        st(g, d),                   # flicker
    ]
    if n_orientations == 8:
        diag = (gx + gy) * inv
        anti = (gx - gy) * inv
        bank.append((st(diag, m) + st(g, d)) * inv)   # down-right
        bank.append((st(anti, m) + st(g, d)) * inv)   # up-right
    kernels = np.stack(bank)  # (K, 2, kh, kw)
    kernels -= kernels.mean(axis=(1, 2, 3), keepdims=True)
    norms = np.sqrt((kernels ** 2).sum(axis=(1, 2, 3), keepdims=True))
    kernels /= norms
    return kernels.astype(np.float32)


def analytic_temporal_network(n_orientations: int = 6, n_scales: int = 3,
                              kernel_size: int = 11, sigma: float = 1.0,
                              epsilon: float = 1e-6) -> TemporalNetwork:
    bank = build_analytic_filterbank(n_orientations, kernel_size, kernel_size, sigma)
    return TemporalNetwork(filters=bank, n_scales=n_scales, epsilon=epsilon)


def load_temporal_network(archive: TensorArchive) -> TemporalNetwork:
    try:
        bank = archive.require("msoe.filters")
    except ArchiveError as exc:
        raise TemporalStreamError(str(exc)) from exc
    n_scales = int(archive.metadata.get("msoe.scales", "3"))
    epsilon = float(archive.metadata.get("msoe.epsilon", "1e-6"))
    return TemporalNetwork(filters=bank, n_scales=n_scales, epsilon=epsilon)


# ---------------------------------------------------------------------------
# Graph construction / evaluation
# ---------------------------------------------------------------------------

def build_temporal_graph(net: TemporalNetwork, frame: ad.Node,
                         frame_prev: ad.Node) -> ad.Node:
    """Concatenation-layer activation matrix node (K * scales, H * W)."""
    if frame.shape != frame_prev.shape:
        raise TemporalStreamError(
            f"frame pair shapes differ: {frame.shape} vs {frame_prev.shape}")
    h, w = frame.shape[0], frame.shape[1]
    kh = net.filters.shape[2]
    min_side = min(h, w) // (2 ** (net.n_scales - 1))
    if min_side < max(2, kh // 2 + 1):
        raise TemporalStreamError(
            f"input {h}x{w} too small for {net.n_scales} scales with "
            f"{kh}x{net.filters.shape[3]} kernels")
    pair = ad.concat_channels([ad.grayscale(frame_prev, GRAY_COEFFS),
                               ad.grayscale(frame, GRAY_COEFFS)])
    maps = []
    level = pair
    for s in range(net.n_scales):
        if s > 0:
            level = ad.avgpool2(level)
        responses = ad.conv_frame_pair(level, net.filters, pad_mode="reflect",
                                       name=f"orient_s{s}")
        energy = ad.square(responses)
        normalized = ad.divisive_norm(energy, net.epsilon)
        maps.append(normalized if s == 0 else ad.resize_bilinear(normalized, (h, w)))
    return ad.as_filter_matrix(ad.concat_channels(maps))


def temporal_activations(frame: np.ndarray, frame_prev: np.ndarray,
                         net: TemporalNetwork) -> ActivationMap:
    """Evaluate the concatenation layer for one consecutive frame pair."""
    frame = np.asarray(frame, dtype=np.float32)
    frame_prev = np.asarray(frame_prev, dtype=np.float32)
    if frame.shape != frame_prev.shape:
        raise TemporalStreamError(
            f"frame pair shapes differ: {frame.shape} vs {frame_prev.shape}")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise TemporalStreamError(f"frames must be (H,W,3), got {frame.shape}")
    f_leaf = ad.leaf("frame", frame.shape)
    p_leaf = ad.leaf("frame_prev", frame.shape)
    node = build_temporal_graph(net, f_leaf, p_leaf)
    graph = ad.Graph(ad.reduce_sum(node), outputs={"concat": node})
    graph.forward({"frame": frame, "frame_prev": frame_prev})
    return ActivationMap(layer="concat", matrix=graph.output_values()["concat"])
