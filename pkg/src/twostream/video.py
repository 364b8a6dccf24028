"""Video exchange as frame-image directories.

A video on disk is a directory of equally sized frame files plus a
`video.meta` key=value text file recording frames/height/width/channels,
fps and the storage format. Two formats exist:

* ``png8``  -- lossless 8-bit PNG per frame (quantized round-half-to-even)
* ``raw32`` -- raw little-endian float32 per frame, planar (C planes of
  H*W values), lossless for test fixtures

Frame files sort lexicographically; loading never depends on directory
enumeration order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

FORMATS = ("png8", "raw32")
META_NAME = "video.meta"


class VideoIOError(ValueError):
    """Raised for malformed frame directories or metadata."""


@dataclass(frozen=True)
class VideoTensor:
    """A clip as a (T, H, W, C) float32 array in [0, 1] plus frame rate."""

    frames: np.ndarray
    fps: float
    color_space: str = "rgb"

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4:
            raise VideoIOError(f"frames must be (T,H,W,C), got shape {f.shape}")
        t, h, w, c = f.shape
        if t < 1 or h < 1 or w < 1:
            raise VideoIOError(f"empty video dimensions {f.shape}")
        expected_c = {"rgb": 3, "grayscale": 1}.get(self.color_space)
        if expected_c is None:
            raise VideoIOError(f"unknown color space {self.color_space!r}")
        if c != expected_c:
            raise VideoIOError(
                f"{self.color_space} video must have {expected_c} channels, got {c}")
        if not np.isfinite(f).all():
            raise VideoIOError("frames contain non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise VideoIOError(
                f"pixel values outside [0,1]: range [{f.min():.4g}, {f.max():.4g}]")
        if not (self.fps > 0):
            raise VideoIOError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", np.ascontiguousarray(f))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def frame(self, t: int) -> np.ndarray:
        return self.frames[t]


def _write_meta(path: str, video: VideoTensor, fmt: str):
    t, h, w, c = video.shape
    lines = [
        f"frames={t}",
        f"height={h}",
        f"width={w}",
        f"channels={c}",
        f"fps={video.fps!r}",
        f"format={fmt}",
        f"color_space={video.color_space}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_meta(path: str) -> dict[str, str]:
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise VideoIOError(f"malformed metadata line {line!r} in {path}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-to-even (numpy's default)."""
    return np.round(values * 255.0).astype(np.uint8)


def save_video(video: VideoTensor, dir_path: str, fmt: str = "png8") -> None:
    """Write a frame sequence plus metadata; overwrites existing frames."""
    if fmt not in FORMATS:
        raise VideoIOError(f"unknown video format {fmt!r}; expected one of {FORMATS}")
    try:
        os.makedirs(dir_path, exist_ok=True)
    except OSError as exc:
        raise VideoIOError(f"cannot create output directory {dir_path}: {exc}") from exc
    t = video.shape[0]
    for i in range(t):
        frame = video.frames[i]
        if fmt == "png8":
            name = os.path.join(dir_path, f"frame_{i:05d}.png")
            data = quantize_u8(frame)
            img = Image.fromarray(data if data.shape[2] == 3 else data[:, :, 0],
                                  mode="RGB" if data.shape[2] == 3 else "L")
            img.save(name)
        else:
            name = os.path.join(dir_path, f"frame_{i:05d}.f32")
            planar = np.ascontiguousarray(frame.transpose(2, 0, 1), dtype="<f4")
            with open(name, "wb") as fh:
                fh.write(planar.tobytes())
    _write_meta(os.path.join(dir_path, META_NAME), video, fmt)


def load_video(dir_path: str) -> VideoTensor:
    """Load a frame directory written by save_video (or hand-assembled)."""
    if not os.path.isdir(dir_path):
        raise VideoIOError(f"not a directory: {dir_path}")
    meta_path = os.path.join(dir_path, META_NAME)
    if not os.path.exists(meta_path):
        raise VideoIOError(f"missing metadata file {meta_path}")
    meta = _read_meta(meta_path)
    try:
        fps = float(meta["fps"])
        fmt = meta["format"]
        color_space = meta.get("color_space", "rgb")
    except KeyError as exc:
        raise VideoIOError(f"metadata missing key {exc} in {meta_path}") from exc
    if fmt not in FORMATS:
        raise VideoIOError(f"unknown format {fmt!r} in {meta_path}")
    ext = ".png" if fmt == "png8" else ".f32"
    names = sorted(n for n in os.listdir(dir_path) if n.endswith(ext))
    if not names:
        raise VideoIOError(f"no {ext} frames found in {dir_path}")
    if "frames" in meta and int(meta["frames"]) != len(names):
        raise VideoIOError(
            f"metadata declares {meta['frames']} frames but {len(names)} {ext} files exist")
    frames = []
    shape_hw = None
    for name in names:
        full = os.path.join(dir_path, name)
        if fmt == "png8":
            img = Image.open(full)
            arr = np.asarray(img)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.shape[2] == 4:
                arr = arr[:, :, :3]
            frame = arr.astype(np.float32) / 255.0
        else:
            h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
            raw = np.fromfile(full, dtype="<f4")
            if raw.size != h * w * c:
                raise VideoIOError(
                    f"frame {name}: expected {h * w * c} float32 values, found {raw.size}")
            frame = raw.reshape(c, h, w).transpose(1, 2, 0)
        if shape_hw is None:
            shape_hw = frame.shape
        elif frame.shape != shape_hw:
            raise VideoIOError(
                f"frame {name} has size {frame.shape}, expected {shape_hw}")
        frames.append(frame)
    stack = np.stack(frames).astype(np.float32)
    stack = np.clip(stack, 0.0, 1.0)
    space = "grayscale" if stack.shape[3] == 1 else color_space
    return VideoTensor(frames=stack, fps=fps, color_space=space)
