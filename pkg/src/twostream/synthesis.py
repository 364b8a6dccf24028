"""Frame-sequential pixel optimization.

Each output frame starts as a blend of the previous post-processed frame
with uniform noise, then descends the two-stream objective over a
coarse-to-fine octave schedule. Gradients are normalized per channel by
their standard deviation over the working height/width (guarded by 1e-8)
and applied with the octave's learning rate; pixels clamp to [0, 1] after
every step. Gradients flow only into the current frame; the previous
frame enters the temporal stream as a constant.

Mirror padding prepends the first few target frames in reversed order so
the earliest real frames are optimized with a settled predecessor; the
padded outputs are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objective as obj
from .color_transfer import ColorTransferParams, color_transfer
from .kernels import resize_bilinear
from .objective import LossBreakdown, LossGraph, LossWeights
from .spatial import SpatialNetwork
from .temporal import TemporalNetwork
from .video import VideoTensor


class SynthesisError(RuntimeError):
    """Raised when optimization hits invalid configuration or numerics."""


@dataclass(frozen=True)
class OctaveSchedule:
    """Per-octave resolution exponents and optimization hyperparameters."""

    exponents: tuple = (-2, -1, 0)
    scale: float = 1.5
    iterations: tuple = (250, 750, 1000)
    learning_rates: tuple = (0.001, 0.003, 0.005)
    tv_weights: tuple = (0.05, 0.1, 0.5)

    def __post_init__(self):
        n = len(self.exponents)
        if n == 0:
            raise SynthesisError("octave list must be nonempty")
        if self.exponents[-1] != 0:
            raise SynthesisError("last octave exponent must be 0 (native resolution)")
        if not (self.scale > 1.0):
            raise SynthesisError(f"octave scale must exceed 1, got {self.scale}")
        for name in ("iterations", "learning_rates", "tv_weights"):
            if len(getattr(self, name)) != n:
                raise SynthesisError(
                    f"{name} must have one entry per octave ({n}), "
                    f"got {len(getattr(self, name))}")
        if any(i < 0 for i in self.iterations):
            raise SynthesisError("iteration counts must be nonnegative")
        if any(w < 0 for w in self.tv_weights):
            raise SynthesisError("TV weights must be nonnegative")

    def resolution(self, h: int, w: int, exponent: int) -> tuple[int, int]:
        factor = self.scale ** exponent
        hs, ws = int(round(h * factor)), int(round(w * factor))
        if hs < 8 or ws < 8:
            raise SynthesisError(
                f"octave {exponent} gives {hs}x{ws}, below the 8 px minimum")
        return hs, ws


@dataclass(frozen=True)
class SynthesisConfig:
    octaves: OctaveSchedule = OctaveSchedule()
    weights: LossWeights = LossWeights()
    blend_ratio: float = 0.95
    pad_frames: int = 5
    seed: int = 0
    color: ColorTransferParams | None = ColorTransferParams()

    def __post_init__(self):
        if not (0.0 <= self.blend_ratio <= 1.0):
            raise SynthesisError(f"invalid blending ratio: {self.blend_ratio}")
        if self.pad_frames < 0:
            raise SynthesisError(f"padding frame count must be >= 0, got {self.pad_frames}")


@dataclass
class FrameState:
    """Mutable per-frame optimization state."""

    g_t: np.ndarray
    g_prev_post: np.ndarray | None


@dataclass
class LossLogRow:
    frame: int
    octave: int
    iteration: int
    breakdown: LossBreakdown


def mirror_pad(video: VideoTensor, pad_frames: int) -> VideoTensor:
    """Prepend the first `pad_frames` frames in reversed order."""
    t = video.shape[0]
    if pad_frames > t:
        raise SynthesisError(
            f"cannot mirror-pad {pad_frames} frames onto a {t}-frame video")
    if pad_frames == 0:
        return video
    head = video.frames[:pad_frames][::-1]
    return VideoTensor(frames=np.concatenate([head, video.frames], axis=0),
                       fps=video.fps, color_space=video.color_space)


def init_frame(g_prev_post: np.ndarray | None, blend_ratio: float,
               rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Blend the previous post-processed frame with uniform noise."""
    if not (0.0 <= blend_ratio <= 1.0):
        raise SynthesisError(f"invalid blending ratio: {blend_ratio}")
    noise = rng.random(shape, dtype=np.float32)
    if g_prev_post is None:
        return noise
    phi = np.float32(blend_ratio)
    return phi * g_prev_post + (np.float32(1.0) - phi) * noise


def _resize_frame(frame: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    out = resize_bilinear(frame, hw)
    return np.clip(out, 0.0, 1.0)


def optimize_frame(state: FrameState,
                   targets: dict[str, tuple[np.ndarray, np.ndarray | None]],
                   spatial_net: SpatialNetwork,
                   temporal_net: TemporalNetwork | None,
                   schedule: OctaveSchedule,
                   weights: LossWeights,
                   graph_cache: dict | None = None,
                   log: list[LossLogRow] | None = None,
                   frame_index: int = 0) -> np.ndarray:
    """Descend the objective over the octave chain; returns the native frame.

    ``targets`` maps each active term to its (current, previous) native
    target frames. Temporal terms run only when the state has a previous
    post-processed frame; the very first frame of a sequence has none and
    is optimized on spatial terms alone.
    """
    h, w = state.g_t.shape[:2]
    temporal_active = (
        state.g_prev_post is not None
        and (weights.temporal_content > 0 or weights.temporal_texture > 0)
    )
    for term in weights.active_terms:
        if term.startswith("temporal") and not temporal_active:
            continue
        if term not in targets:
            raise SynthesisError(f"active loss term {term!r} has no assigned target")
    if graph_cache is None:
        graph_cache = {}
    g = state.g_t
    for oi, exponent in enumerate(schedule.exponents):
        hw_o = schedule.resolution(h, w, exponent)
        g = _resize_frame(g, hw_o)
        n_iter = schedule.iterations[oi]
        eta = np.float32(schedule.learning_rates[oi])
        tv_w = schedule.tv_weights[oi]
        key = (hw_o, tv_w, temporal_active)
        lg: LossGraph | None = graph_cache.get(key)
        if lg is None:
            lg = obj.build_loss_graph(spatial_net, temporal_net, weights, hw_o,
                                      tv_w, temporal_active=temporal_active)
            graph_cache[key] = lg
        term_targets = {}
        for term in lg.target_leaves:
            tgt, tgt_prev = targets[term]
            term_targets[term] = (
                _resize_frame(tgt, hw_o),
                _resize_frame(tgt_prev, hw_o) if tgt_prev is not None else None,
            )
        bindings = obj.target_statistics(lg, spatial_net, temporal_net, term_targets,
                                         stat_cache=graph_cache)
        if lg.has_temporal:
            bindings["g_prev"] = _resize_frame(state.g_prev_post, hw_o)
        for it in range(n_iter):
            bindings["g"] = g
            total = float(lg.graph.forward(bindings))
            breakdown = obj.breakdown_from_outputs(lg.graph.output_values())
            if not np.isfinite(total):
                raise SynthesisError(
                    f"non-finite loss at frame {frame_index}, octave {exponent}, "
                    f"iteration {it}")
            if log is not None:
                log.append(LossLogRow(frame=frame_index, octave=exponent,
                                      iteration=it, breakdown=breakdown))
            grad = lg.graph.backward("g")
            if not np.isfinite(grad).all():
                raise SynthesisError(
                    f"non-finite gradient at frame {frame_index}, octave {exponent}, "
                    f"iteration {it}")
            std = grad.std(axis=(0, 1), keepdims=True) + np.float32(1e-8)
            g = np.clip(g - eta * (grad / std), 0.0, 1.0)
    return g


def synthesize_video(targets: dict[str, VideoTensor] | VideoTensor,
                     cfg: SynthesisConfig,
                     spatial_net: SpatialNetwork,
                     temporal_net: TemporalNetwork | None,
                     log: list[LossLogRow] | None = None) -> VideoTensor:
    """Optimize every frame in sequence and drop the mirror-padded head.

    ``targets`` is either one clip for all active terms or a dict mapping
    term names to clips (all sharing T, H, W). The color-transfer
    reference is the spatial-texture target when assigned, else the first
    active target.
    """
    if isinstance(targets, VideoTensor):
        targets = {term: targets for term in cfg.weights.active_terms}
    active = cfg.weights.active_terms
    if not active:
        raise SynthesisError("no active loss terms; all weights are zero")
    for term in active:
        if term not in targets:
            raise SynthesisError(f"active loss term {term!r} has no assigned target")
    shapes = {targets[t].shape for t in active}
    if len(shapes) > 1:
        raise SynthesisError(f"targets disagree on shape: {sorted(shapes)}")
    t_total, h, w, _ = next(iter(shapes))
    reference = targets.get("spatial_texture", targets[active[0]])

    padded = {term: mirror_pad(targets[term], cfg.pad_frames) for term in active}
    padded_ref = mirror_pad(reference, cfg.pad_frames)
    rng = np.random.default_rng(cfg.seed)
    graph_cache: dict = {}
    out_frames = []
    g_prev_post: np.ndarray | None = None
    for t in range(t_total + cfg.pad_frames):
        state = FrameState(
            g_t=init_frame(g_prev_post, cfg.blend_ratio, rng, (h, w, 3)),
            g_prev_post=g_prev_post,
        )
        frame_targets = {}
        for term in active:
            clip = padded[term].frames
            frame_targets[term] = (clip[t], clip[t - 1] if t > 0 else None)
        result = optimize_frame(state, frame_targets, spatial_net, temporal_net,
                                cfg.octaves, cfg.weights, graph_cache=graph_cache,
                                log=log, frame_index=t)
        if cfg.color is not None:
            result = color_transfer(result, padded_ref.frames[t], cfg.color, rng=rng)
        out_frames.append(result)
        g_prev_post = result
    frames = np.stack(out_frames[cfg.pad_frames:])
    return VideoTensor(frames=frames, fps=reference.fps,
                       color_space=reference.color_space)
