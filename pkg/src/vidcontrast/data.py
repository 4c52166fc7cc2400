"""Synthetic moving-shape videos, two-clip sampling and clip augmentation.

Each video shows one shape travelling along one motion pattern; the class is
the (shape, motion) combination.  Labels live on :class:`SyntheticVideo` only
and never on the clip pairs handed to training.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

SHAPES = ("square", "circle", "triangle", "cross")
MOTIONS = ("left_right", "up_down", "diagonal", "circular")

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class VideoSpec:
    n_frames: int = 16
    frame_size: int = 24
    clip_len: int = 4
    temporal_stride: int = 1
    crop_size: int = 16

    @property
    def clip_span(self) -> int:
        return (self.clip_len - 1) * self.temporal_stride + 1

    def validate(self) -> None:
        if self.clip_span > self.n_frames:
            raise ConfigError(f"clip span {self.clip_span} exceeds {self.n_frames} frames")
        if self.crop_size > self.frame_size:
            raise ConfigError("crop_size cannot exceed frame_size")


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_p: float = 0.2
    jitter_strength: float = 0.4
    jitter_p: float = 0.8
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # [1, T, H, W] in [0, 1]
    class_id: int
    video_id: int
    params: dict = field(default_factory=dict)


@dataclass
class ClipPair:
    x1: np.ndarray
    x2: np.ndarray
    video_id: int


def class_grid(n_classes: int) -> tuple[int, int]:
    """(n_shapes, n_motions) with n_shapes * n_motions == n_classes."""
    for n_motions in range(min(len(MOTIONS), n_classes), 0, -1):
        if n_classes % n_motions == 0 and n_classes // n_motions <= len(SHAPES):
            return n_classes // n_motions, n_motions
    raise ConfigError(
        f"{n_classes} classes cannot be split into <= {len(SHAPES)} shapes x <= {len(MOTIONS)} motions"
    )


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    raise ConfigError(f"unknown shape {shape!r}")


def _trajectory(motion: str, t: np.ndarray, amp: float, omega: float, phase: float) -> tuple[np.ndarray, np.ndarray]:
    s = np.sin(omega * t + phase)
    if motion == "left_right":
        return amp * s, np.zeros_like(t)
    if motion == "up_down":
        return np.zeros_like(t), amp * s
    if motion == "diagonal":
        return amp * s / math.sqrt(2), amp * s / math.sqrt(2)
    if motion == "circular":
        return amp * np.cos(omega * t + phase), amp * s
    raise ConfigError(f"unknown motion {motion!r}")


def render_video(shape: str, motion: str, params: dict, spec: VideoSpec) -> np.ndarray:
    """Rasterise one video with 4x4 supersampling for soft edges."""
    n, size = spec.n_frames, spec.frame_size
    fine = (np.arange(size * _SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    gy, gx = np.meshgrid(fine, fine, indexing="ij")
    t = np.arange(n, dtype=np.float64)
    ox, oy = _trajectory(motion, t, params["amplitude"], params["speed"], params["phase"])
    frames = np.empty((n, size, size), dtype=np.float64)
    for i in range(n):
        cx = params["center_x"] + ox[i]
        cy = params["center_y"] + oy[i]
        mask = _shape_mask(shape, gx - cx, gy - cy, params["radius"]).astype(np.float64)
        frames[i] = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    return (params["intensity"] * frames)[None].astype(np.float32)


def generate_video(seed: int, index: int, n_classes: int, spec: VideoSpec = VideoSpec()) -> SyntheticVideo:
    n_shapes, n_motions = class_grid(n_classes)
    class_id = index % n_classes
    shape_idx, motion_idx = divmod(class_id, n_motions)
    rng = np.random.default_rng([seed, index])
    half = spec.frame_size / 2
    params = {
        "shape": SHAPES[shape_idx],
        "motion": MOTIONS[motion_idx],
        "radius": float(rng.uniform(4.5, 6.5)),
        "amplitude": float(rng.uniform(3.0, 4.5)),
        "speed": float(rng.uniform(0.25, 0.5)),
        "phase": float(rng.uniform(0, 2 * math.pi)),
        "center_x": float(half + rng.uniform(-1.5, 1.5)),
        "center_y": float(half + rng.uniform(-1.5, 1.5)),
        "intensity": float(rng.uniform(0.7, 1.0)),
    }
    frames = render_video(params["shape"], params["motion"], params, spec)
    return SyntheticVideo(frames, class_id, index, params)


def generate_dataset(seed: int, n_videos: int, n_classes: int, spec: VideoSpec = VideoSpec()) -> list[SyntheticVideo]:
    """``n_videos`` balanced videos; video ``i`` has class ``i % n_classes``."""
    if n_classes < 1 or n_videos < 1:
        raise ConfigError("n_videos and n_classes must be positive")
    if n_videos % n_classes:
        raise ConfigError(f"n_videos={n_videos} is not divisible by n_classes={n_classes}")
    class_grid(n_classes)
    spec.validate()
    return [generate_video(seed, i, n_classes, spec) for i in range(n_videos)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    """Concrete augmentation choices, shared by every frame of one clip."""

    crop_top: float
    crop_left: float
    crop_side: float
    flip: bool = False
    jitter: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    blur: bool = False
    blur_sigma: float = 0.0

    @classmethod
    def identity(cls, frame_size: int) -> "AugmentParams":
        """Full-frame crop, nothing else: the evaluation view."""
        return cls(0.0, 0.0, float(frame_size))


def sample_augment_params(rng: np.random.Generator, frame_size: int, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    # every draw happens unconditionally so the stream length never depends on outcomes
    scale = rng.uniform(*cfg.crop_scale)
    side = frame_size * math.sqrt(scale)
    top = rng.uniform(0, frame_size - side)
    left = rng.uniform(0, frame_size - side)
    flip = rng.random() < cfg.flip_p
    jitter = rng.random() < cfg.jitter_p
    lo, hi = 1 - cfg.jitter_strength, 1 + cfg.jitter_strength
    brightness = rng.uniform(lo, hi)
    contrast = rng.uniform(lo, hi)
    blur = rng.random() < cfg.blur_p
    sigma = rng.uniform(*cfg.blur_sigma)
    return AugmentParams(float(top), float(left), float(side), bool(flip), bool(jitter),
                         float(brightness), float(contrast), bool(blur), float(sigma))


def resized_crop(clip: np.ndarray, top: float, left: float, side: float, out_size: int) -> np.ndarray:
    """Bilinear resample of the square box (top, left, side) to ``out_size``, all frames alike."""
    c, t, _, _ = clip.shape
    centers = (np.arange(out_size) + 0.5) * (side / out_size) - 0.5
    ys = top + centers
    xs = left + centers
    tt, yy, xx = np.meshgrid(np.arange(t, dtype=np.float64), ys, xs, indexing="ij")
    out = np.empty((c, t, out_size, out_size), dtype=np.float64)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(clip[ch].astype(np.float64), [tt, yy, xx], order=1, mode="nearest")
    return out


def apply_augment(clip: np.ndarray, params: AugmentParams, out_size: int) -> np.ndarray:
    """Crop+resize, flip, brightness/contrast, (grayscale: no-op at C=1), blur, clamp."""
    x = resized_crop(clip, params.crop_top, params.crop_left, params.crop_side, out_size)
    if params.flip:
        x = x[..., ::-1]
    if params.jitter:
        x = x * params.brightness
        m = x.mean()
        x = (x - m) * params.contrast + m
    if params.blur:
        x = ndimage.gaussian_filter(x, sigma=(0, 0, params.blur_sigma, params.blur_sigma), mode="nearest")
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(clip: np.ndarray, rng: np.random.Generator, out_size: int = 16, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return apply_augment(clip, sample_augment_params(rng, clip.shape[-1], cfg), out_size)


def temporal_window(video: SyntheticVideo, start: int, spec: VideoSpec) -> np.ndarray:
    stop = start + spec.clip_span
    return video.frames[:, start:stop:spec.temporal_stride]


def sample_clip_pair(video: SyntheticVideo, rng: np.random.Generator, spec: VideoSpec = VideoSpec(),
                     cfg: AugmentConfig = AugmentConfig()) -> ClipPair:
    """Two independently placed, independently augmented clips of one video."""
    spec.validate()
    n_starts = video.frames.shape[1] - spec.clip_span + 1
    s1, s2 = (int(s) for s in rng.integers(0, n_starts, size=2))
    x1 = augment(temporal_window(video, s1, spec), rng, spec.crop_size, cfg)
    x2 = augment(temporal_window(video, s2, spec), rng, spec.crop_size, cfg)
    return ClipPair(x1, x2, video.video_id)


def center_view(video: SyntheticVideo, spec: VideoSpec = VideoSpec()) -> np.ndarray:
    """Deterministic evaluation clip: centre temporal window, full-frame resize, no jitter."""
    start = (video.frames.shape[1] - spec.clip_span) // 2
    return apply_augment(temporal_window(video, start, spec), AugmentParams.identity(spec.frame_size), spec.crop_size)


# ---------------------------------------------------------------------------
# corpus dump

CORPUS_MAGIC = b"VSYN"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sI4IiQ")


def write_video(path: Path, video: SyntheticVideo) -> None:
    frames = np.ascontiguousarray(video.frames, dtype="<f4")
    if frames.ndim != 4:
        raise DataError(f"expected [C, T, H, W] frames, got {frames.shape}")
    header = _HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, *frames.shape, video.class_id, video.video_id)
    Path(path).write_bytes(header + frames.tobytes())


def read_video(path: Path) -> SyntheticVideo:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, c, t, h, w, class_id, video_id = _HEADER.unpack_from(raw)
    if magic != CORPUS_MAGIC or version != CORPUS_VERSION:
        raise DataError(f"{path}: not a version-{CORPUS_VERSION} corpus file")
    body = raw[_HEADER.size:]
    if len(body) != 4 * c * t * h * w:
        raise DataError(f"{path}: payload size does not match shape {(c, t, h, w)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(c, t, h, w).astype(np.float32)
    return SyntheticVideo(frames, int(class_id), int(video_id))


def dump_corpus(videos: Sequence[SyntheticVideo], out_dir: Path) -> Path:
    """One binary file per video plus ``manifest.csv`` (video_id, class_id, file)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "class_id", "file"])
        for v in videos:
            name = f"video_{v.video_id:06d}.bin"
            write_video(out_dir / name, v)
            writer.writerow([v.video_id, v.class_id, name])
    return manifest


def load_corpus(manifest: Path) -> list[SyntheticVideo]:
    manifest = Path(manifest)
    videos = []
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                v = read_video(manifest.parent / row["file"])
            except KeyError as exc:
                raise DataError(f"missing column {exc}", line=lineno) from None
            if v.video_id != int(row["video_id"]) or v.class_id != int(row["class_id"]):
                raise DataError("manifest disagrees with file header", line=lineno)
            videos.append(v)
    return videos
