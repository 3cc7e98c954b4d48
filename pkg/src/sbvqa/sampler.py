"""Grid mini-patch sampling and video ingestion.

A frame is cut into a ``G x G`` grid of equal cells. One ``P x P`` window is
chosen inside every cell and the same window is used in every sampled frame,
so each tile of the output fragment is a temporally aligned crop at the
source resolution.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import cv2
import numpy as np

from .errors import BadConfig, DecodeError, EmptyVideo, FrameTooSmall, PlanMismatch

DEFAULT_GRID = 7
DEFAULT_PATCH = 32
DEFAULT_T_FRAMES = 16


@dataclass
class VideoTensor:
    """Frames as a ``T x H x W x 3`` array (uint8 or float in [0, 1])."""

    frames: np.ndarray
    frame_rate: Optional[float] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise BadConfig(f"expected T x H x W x 3 frames, got {self.frames.shape}")
        if min(self.frames.shape[:3]) < 1:
            raise EmptyVideo("video has no frames or zero-sized frames")

    @property
    def dims(self) -> Tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return t, h, w

    @property
    def duration(self) -> Optional[float]:
        if not self.frame_rate:
            return None
        return self.frames.shape[0] / self.frame_rate


@dataclass(frozen=True)
class FragmentPlan:
    dims: Tuple[int, int, int]
    grid_count: int
    patch_size: int
    temporal_indices: Tuple[int, ...]
    offsets: Tuple[Tuple[Tuple[int, int], ...], ...]  # [gy][gx] -> (dy, dx)
    seed: Optional[int] = None

    @property
    def cell(self) -> Tuple[int, int]:
        _, h, w = self.dims
        return h // self.grid_count, w // self.grid_count

    @property
    def size(self) -> int:
        return self.grid_count * self.patch_size

    def window(self, gy: int, gx: int) -> Tuple[int, int]:
        """Top-left source pixel of the window feeding tile ``(gy, gx)``."""
        ch, cw = self.cell
        dy, dx = self.offsets[gy][gx]
        return gy * ch + dy, gx * cw + dx


@dataclass
class Fragment:
    tensor: np.ndarray
    plan: FragmentPlan


def _check_config(grid_count: int, patch_size: int, t_frames: int):
    if grid_count <= 0 or patch_size <= 0 or t_frames <= 0:
        raise BadConfig(
            f"grid_count, patch_size and t_frames must be positive "
            f"(got {grid_count}, {patch_size}, {t_frames})"
        )


def plan_fragment(
    dims: Tuple[int, int, int],
    grid_count: int = DEFAULT_GRID,
    patch_size: int = DEFAULT_PATCH,
    t_frames: int = DEFAULT_T_FRAMES,
    mode: str = "eval",
    seed: Optional[int] = None,
) -> FragmentPlan:
    """Choose the per-cell windows and the sampled frame indices.

    In ``train`` mode offsets and the temporal phase are drawn from
    ``np.random.default_rng(seed)``; in ``eval`` mode both are centred and the
    seed is ignored.
    """
    _check_config(grid_count, patch_size, t_frames)
    if mode not in ("train", "eval"):
        raise BadConfig(f"mode must be 'train' or 'eval', not {mode!r}")
    t, h, w = (int(d) for d in dims)
    need = grid_count * patch_size
    if h < need or w < need:
        raise FrameTooSmall(f"frame {h}x{w} is smaller than {need}x{need}; upscale at ingestion")
    if t_frames > t:
        raise BadConfig(f"t_frames={t_frames} exceeds the {t} available frames")

    cell_h, cell_w = h // grid_count, w // grid_count
    slack_h, slack_w = cell_h - patch_size, cell_w - patch_size
    stride = t / t_frames

    if mode == "train":
        rng = np.random.default_rng(seed)
        dy = rng.integers(0, slack_h + 1, size=(grid_count, grid_count))
        dx = rng.integers(0, slack_w + 1, size=(grid_count, grid_count))
        phase = rng.uniform(0.0, stride)
    else:
        dy = np.full((grid_count, grid_count), slack_h // 2)
        dx = np.full((grid_count, grid_count), slack_w // 2)
        phase = stride / 2
        seed = None

    steps = np.floor(phase + stride * np.arange(t_frames)).astype(int)
    steps = np.minimum(steps, t - 1)
    offsets = tuple(
        tuple((int(dy[gy, gx]), int(dx[gy, gx])) for gx in range(grid_count))
        for gy in range(grid_count)
    )
    return FragmentPlan(
        dims=(t, h, w),
        grid_count=grid_count,
        patch_size=patch_size,
        temporal_indices=tuple(int(i) for i in steps),
        offsets=offsets,
        seed=seed,
    )


def sample_fragment(video: VideoTensor, plan: FragmentPlan) -> Fragment:
    if tuple(video.dims) != tuple(plan.dims):
        raise PlanMismatch(f"plan built for {plan.dims}, video is {video.dims}")
    p, g = plan.patch_size, plan.grid_count
    src = video.frames[np.asarray(plan.temporal_indices)]
    out = np.empty((src.shape[0], g * p, g * p, 3), dtype=src.dtype)
    for gy in range(g):
        for gx in range(g):
            y, x = plan.window(gy, gx)
            out[:, gy * p:(gy + 1) * p, gx * p:(gx + 1) * p] = src[:, y:y + p, x:x + p]
    return Fragment(out, plan)


def fragment_from_video(
    video: VideoTensor,
    grid_count: int = DEFAULT_GRID,
    patch_size: int = DEFAULT_PATCH,
    t_frames: int = DEFAULT_T_FRAMES,
    mode: str = "eval",
    seed: Optional[int] = None,
) -> Fragment:
    """Plan and sample in one step; short clips are looped to ``t_frames``."""
    if video.dims[0] < t_frames:
        idx = np.arange(t_frames) % video.dims[0]
        video = VideoTensor(video.frames[idx], video.frame_rate)
    plan = plan_fragment(video.dims, grid_count, patch_size, t_frames, mode, seed)
    return sample_fragment(video, plan)


# ---------------------------------------------------------------- ingestion


@dataclass
class IngestionPolicy:
    min_side: int = DEFAULT_GRID * DEFAULT_PATCH
    max_frames: Optional[int] = None
    cache_dir: Optional[str] = field(default_factory=lambda: os.environ.get("SBVQA_CACHE"))

    @classmethod
    def for_sampler(cls, grid_count: int, patch_size: int, **kw) -> "IngestionPolicy":
        return cls(min_side=grid_count * patch_size, **kw)


def _decode_numpy(path: Path) -> Tuple[np.ndarray, Optional[float]]:
    if path.suffix == ".npz":
        with np.load(path) as data:
            frames = data["frames"]
            fps = float(data["frame_rate"]) if "frame_rate" in data.files else None
        return frames, fps
    return np.load(path, allow_pickle=False), None


def _decode_opencv(path: Path) -> Tuple[np.ndarray, Optional[float]]:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeError(f"cannot open {path}")
    fps = cap.get(cv2.CAP_PROP_FPS) or None
    frames: List[np.ndarray] = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise DecodeError(f"no decodable frames in {path}")
    return np.stack(frames), fps


Decoder = Callable[[Path], Tuple[np.ndarray, Optional[float]]]

DECODERS: Dict[str, Decoder] = {
    ".npy": _decode_numpy,
    ".npz": _decode_numpy,
}


def register_decoder(suffix: str, decoder: Decoder):
    DECODERS[suffix.lower()] = decoder


def decode_file(path) -> Tuple[np.ndarray, Optional[float]]:
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"no such file: {path}")
    decoder = DECODERS.get(path.suffix.lower(), _decode_opencv)
    try:
        return decoder(path)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"failed to decode {path}: {exc}") from exc


def normalize_frames(frames: np.ndarray, min_side: int) -> np.ndarray:
    """Force 3 channels, unit-scaled float32 and a short side of at least ``min_side``."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4 or frames.shape[0] == 0 or 0 in frames.shape[1:3]:
        raise EmptyVideo(f"unusable frame array of shape {frames.shape}")
    if frames.shape[-1] == 1:
        frames = np.repeat(frames, 3, axis=-1)
    elif frames.shape[-1] == 4:
        frames = frames[..., :3]
    elif frames.shape[-1] != 3:
        raise DecodeError(f"unsupported channel count {frames.shape[-1]}")

    if frames.dtype == np.uint8:
        frames = frames.astype(np.float32) / 255.0
    elif np.issubdtype(frames.dtype, np.integer):
        frames = frames.astype(np.float32) / float(np.iinfo(frames.dtype).max)
    else:
        frames = np.clip(frames.astype(np.float32), 0.0, 1.0)

    _, h, w, _ = frames.shape
    short = min(h, w)
    if short < min_side:
        scale = min_side / short
        new_h, new_w = max(min_side, int(np.ceil(h * scale))), max(min_side, int(np.ceil(w * scale)))
        frames = np.stack(
            [cv2.resize(f, (new_w, new_h), interpolation=cv2.INTER_LINEAR) for f in frames]
        )
    return np.ascontiguousarray(frames)


def _cache_path(cache_dir: str, path: Path, policy: IngestionPolicy) -> Path:
    st = path.stat()
    key = f"{path.resolve()}|{st.st_size}|{st.st_mtime_ns}|{policy.min_side}|{policy.max_frames}"
    return Path(cache_dir) / (hashlib.sha1(key.encode()).hexdigest() + ".npz")


def ingest_video(path, policy: Optional[IngestionPolicy] = None) -> VideoTensor:
    """Decode ``path`` into a normalized :class:`VideoTensor`.

    Raises:
        DecodeError: the file is missing or cannot be decoded.
        EmptyVideo: decoding produced no usable frames.
    """
    policy = policy or IngestionPolicy()
    path = Path(path)
    cached = None
    if policy.cache_dir and path.is_file():
        cached = _cache_path(policy.cache_dir, path, policy)
        if cached.is_file():
            with np.load(cached) as data:
                fps = float(data["frame_rate"])
                return VideoTensor(data["frames"], fps if fps > 0 else None)

    frames, fps = decode_file(path)
    if policy.max_frames:
        frames = frames[: policy.max_frames]
    video = VideoTensor(normalize_frames(frames, policy.min_side), fps)

    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cached, frames=video.frames, frame_rate=fps or 0.0)
    return video
