"""Phase-scrambling baseline generator.

Three steps: (1) one random 2-d phase field, identical for every frame
and channel, is added to each frame's spatial spectrum; (2) a random 3-d
phase field is added to the full clip spectrum per channel; (3) each
frame is color-transferred against the corresponding original frame and
clamped. Amplitude spectra are untouched by steps 1-2.

Phase fields are the angles of the FFT of white noise, which makes them
Hermitian-antisymmetric by construction (self-conjugate bins come out 0
or pi, keeping the inverse transform real); the DC bin is forced to 0 so
means survive. Random angles distribute uniformly over (-pi, pi] on all
regular bins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .color_transfer import ColorTransferParams, color_transfer
from .video import VideoTensor


class StpsError(ValueError):
    """Raised for inputs the scrambler cannot process."""


@dataclass(frozen=True)
class StpsParams:
    seed: int = 0
    color: ColorTransferParams | None = ColorTransferParams()


def _random_phase_field(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Hermitian-antisymmetric uniform phases with zero DC."""
    noise = rng.standard_normal(shape)
    phase = np.angle(np.fft.fftn(noise))
    phase[(0,) * len(shape)] = 0.0
    return phase


def phase_scramble_stack(video: VideoTensor, seed: int = 0,
                         steps: int = 2) -> np.ndarray:
    """The scrambled (T, H, W, C) stack before color transfer, unclamped.

    ``steps=1`` stops after the shared 2-d scramble, which leaves every
    frame's 2-d amplitude spectrum untouched. The full ``steps=2`` adds
    the 3-d scramble, which preserves the clip's 3-d amplitude spectrum
    (and therefore redistributes energy across frames, so per-frame 2-d
    amplitudes are only preserved at step 1).
    """
    t, h, w, c = video.shape
    if t < 2:
        raise StpsError("phase scrambling needs at least 2 frames")
    if steps not in (1, 2):
        raise StpsError(f"steps must be 1 or 2, got {steps}")
    rng = np.random.default_rng(seed)
    frames = video.frames.astype(np.float64)

    # step 1: shared 2-d phase offset on every frame's spatial spectrum
    phase2d = _random_phase_field((h, w), rng)
    spec = np.fft.fft2(frames, axes=(1, 2))
    spec *= np.exp(1j * phase2d)[None, :, :, None]
    step1 = np.fft.ifft2(spec, axes=(1, 2))
    _check_real(step1)
    step1 = step1.real
    if steps == 1:
        return step1

    # step 2: 3-d phase offset over the whole clip, shared across channels
    phase3d = _random_phase_field((t, h, w), rng)
    spec3 = np.fft.fftn(step1, axes=(0, 1, 2))
    spec3 *= np.exp(1j * phase3d)[:, :, :, None]
    step2 = np.fft.ifftn(spec3, axes=(0, 1, 2))
    _check_real(step2)
    return step2.real


def _check_real(arr: np.ndarray) -> None:
    residual = float(np.abs(arr.imag).max())
    scale = max(1.0, float(np.abs(arr.real).max()))
    if residual > 1e-5 * scale:
        raise StpsError(f"inverse transform lost realness (residual {residual:.3g})")


def stps_generate(video: VideoTensor, params: StpsParams = StpsParams()) -> VideoTensor:
    """Scramble phases, then color-transfer each frame against the original."""
    scrambled = phase_scramble_stack(video, params.seed)
    rng = np.random.default_rng(params.seed + 1)
    out = np.empty_like(scrambled, dtype=np.float32)
    for t in range(scrambled.shape[0]):
        frame = np.clip(scrambled[t], 0.0, 1.0).astype(np.float32)
        if params.color is not None:
            frame = color_transfer(frame, video.frames[t], params.color, rng=rng)
        out[t] = frame
    return VideoTensor(frames=np.clip(out, 0.0, 1.0), fps=video.fps,
                       color_space=video.color_space)
