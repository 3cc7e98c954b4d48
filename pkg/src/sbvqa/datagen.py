"""Procedural clips with controlled distortions and known quality ordering."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

from .errors import BadConfig
from .manifest import DatasetManifest, ManifestEntry

DISTORTIONS = ("blur", "noise", "block_quant", "brightness", "contrast", "shake")


@dataclass
class SynthSpec:
    n_clips: int = 24
    frames: int = 16
    dims: Tuple[int, int] = (112, 112)
    distortion_types: Tuple[str, ...] = ("blur", "noise", "block_quant")
    strength_grid: Tuple[float, ...] = (0.0, 0.5, 1.0)
    seed: int = 0
    mos_range: Tuple[float, float] = (1.0, 5.0)
    split_fractions: Tuple[float, float, float] = (0.6, 0.0, 0.4)
    frame_rate: float = 8.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.distortion_types = tuple(self.distortion_types)
        self.strength_grid = tuple(float(s) for s in self.strength_grid)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.mos_range = tuple(float(v) for v in self.mos_range)
        if self.n_clips < 1 or self.frames < 1 or min(self.dims) < 1:
            raise BadConfig("n_clips, frames and dims must be positive")
        unknown = set(self.distortion_types) - set(DISTORTIONS)
        if unknown or not self.distortion_types:
            raise BadConfig(f"unknown distortion types {sorted(unknown)}")
        g = self.strength_grid
        if not g or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 0 or g[-1] > 1:
            raise BadConfig(f"strength_grid must be strictly ascending within [0, 1], got {g}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise BadConfig("split_fractions must be three values summing to 1")

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        data = json.loads(Path(path).read_text())
        try:
            return cls(**data)
        except TypeError as exc:
            raise BadConfig(f"{path}: {exc}") from exc

    def mos_for(self, strength: float) -> float:
        lo, hi = self.mos_range
        return (hi - lo) * (1.0 - strength) + lo


# ------------------------------------------------------------- base clips


def base_clip(rng: np.random.Generator, frames: int, h: int, w: int) -> np.ndarray:
    """Moving textured shapes over a smooth patterned background, float in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = float(max(h, w))
    bg = np.empty((h, w, 3))
    for c in range(3):
        f = rng.uniform(0.3, 1.5, size=2)
        bg[..., c] = 0.45 + 0.15 * rng.uniform(-1, 1) + 0.15 * np.sin(
            2 * np.pi * (f[0] * yy + f[1] * xx) / scale + rng.uniform(0, 2 * np.pi))
    theta, period = rng.uniform(0, np.pi), rng.uniform(6, 14)
    stripes = np.sign(np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period))
    bg += 0.08 * stripes[..., None]
    pan = rng.uniform(-1.5, 1.5, size=2)

    shapes = []
    for _ in range(int(rng.integers(3, 7))):
        shapes.append(dict(
            kind=rng.choice(["disc", "box"]),
            size=rng.uniform(0.08, 0.22) * scale,
            color=rng.uniform(0.05, 0.95, size=3),
            check=rng.uniform(3, 8),
            pos=rng.uniform(0, [h, w]),
            vel=rng.uniform(-3, 3, size=2),
        ))

    out = np.empty((frames, h, w, 3))
    for t in range(frames):
        sy, sx = (pan * t).round().astype(int)
        frame = np.roll(bg, (sy, sx), axis=(0, 1)).copy()
        for s in shapes:
            cy, cx = (s["pos"] + s["vel"] * t) % [h, w]
            dy = (yy - cy + h / 2) % h - h / 2
            dx = (xx - cx + w / 2) % w - w / 2
            if s["kind"] == "disc":
                mask = dy ** 2 + dx ** 2 <= s["size"] ** 2
            else:
                mask = (np.abs(dy) <= s["size"]) & (np.abs(dx) <= s["size"] * 0.7)
            checker = ((np.floor(dy / s["check"]) + np.floor(dx / s["check"])) % 2)[..., None]
            fill = np.clip(s["color"] * (0.75 + 0.5 * checker), 0, 1)
            frame = np.where(mask[..., None], fill, frame)
        out[t] = frame
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------- distortions


def block_dct_quantize(frames: np.ndarray, step: float, block: int = 8) -> np.ndarray:
    """Uniformly quantize orthonormal 2-D DCT coefficients of ``block``-sized tiles."""
    if step <= 0:
        return frames.copy()
    t, h, w, c = frames.shape
    ph, pw = (-h) % block, (-w) % block
    x = np.pad(frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = x.shape[1] // block, x.shape[2] // block
    tiles = x.reshape(t, hb, block, wb, block, c)
    coef = dctn(tiles, axes=(2, 4), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(2, 4), norm="ortho").reshape(x.shape)
    return np.clip(rec[:, :h, :w], 0.0, 1.0)


def _shake(frames: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    t, h, w, _ = frames.shape
    out = np.empty_like(frames)
    for i in range(t):
        shift = rng.uniform(-1, 1, size=2) * 8.0 * strength
        angle = rng.uniform(-1, 1) * 4.0 * strength
        m = cv2.getRotationMatrix2D((w / 2, h / 2), angle, 1.0)
        m[:, 2] += shift
        out[i] = cv2.warpAffine(frames[i].astype(np.float32), m, (w, h),
                                flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    return out


def apply_distortion(frames: np.ndarray, kind: str, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Degrade unit-scaled ``frames``; strength 0 returns an unchanged copy."""
    if not 0.0 <= strength <= 1.0:
        raise BadConfig(f"strength must lie in [0, 1], got {strength}")
    if strength == 0:
        return frames.copy()
    if kind == "blur":
        s = 2.2 * strength
        out = gaussian_filter(frames, sigma=(0, s, s, 0), mode="reflect")
    elif kind == "noise":
        out = frames + rng.normal(0.0, 0.12 * strength, size=frames.shape)
    elif kind == "block_quant":
        out = block_dct_quantize(frames, 0.6 * strength)
    elif kind == "brightness":
        out = frames * (1.0 - 0.6 * strength)
    elif kind == "contrast":
        mean = frames.mean(axis=(1, 2, 3), keepdims=True)
        out = mean + (frames - mean) * (1.0 - 0.75 * strength)
    elif kind == "shake":
        out = _shake(frames, strength, rng)
    else:
        raise BadConfig(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


# -------------------------------------------------------------- generation


def _assign_splits(spec: SynthSpec, kinds: Sequence[str]) -> List[str]:
    """Split base clips per distortion family so every split sees every family."""
    rng = np.random.default_rng([spec.seed, 1])
    splits = [""] * spec.n_clips
    for kind in dict.fromkeys(kinds):
        members = [i for i, k in enumerate(kinds) if k == kind]
        members = [members[i] for i in rng.permutation(len(members))]
        n = len(members)
        n_test = int(round(spec.split_fractions[2] * n))
        n_val = int(round(spec.split_fractions[1] * n))
        for rank, clip in enumerate(members):
            if rank < n_test:
                splits[clip] = "test"
            elif rank < n_test + n_val:
                splits[clip] = "val"
            else:
                splits[clip] = "train"
    return splits


def _render_clip(args) -> List[dict]:
    spec, clip, kind, split, out_dir = args
    h, w = spec.dims
    clean = base_clip(np.random.default_rng([spec.seed, 0, clip]), spec.frames, h, w)
    records = []
    for level, strength in enumerate(spec.strength_grid):
        rng = np.random.default_rng([spec.seed, 2, clip, level])
        video = to_uint8(apply_distortion(clean, kind, strength, rng))
        vid = f"c{clip:03d}_{kind}_l{level}"
        rel = f"videos/{vid}.npy"
        np.save(Path(out_dir) / rel, video)
        records.append(dict(
            id=vid, video_path=rel, mos=spec.mos_for(strength), split=split,
            clip_id=f"c{clip:03d}", distortion=kind, strength=strength,
            level=len(spec.strength_grid) - 1 - level, frame_rate=spec.frame_rate,
        ))
    return records


def generate(spec: SynthSpec, out_dir, jobs: int = 1) -> DatasetManifest:
    """Render every clip variant to ``out_dir/videos`` and write ``manifest.jsonl``.

    ``level`` in each record is the quality level (higher is better), which
    is what the ladder analysis expects.
    """
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    kinds = [spec.distortion_types[i % len(spec.distortion_types)] for i in range(spec.n_clips)]
    splits = _assign_splits(spec, kinds)
    tasks = [(spec, i, kinds[i], splits[i], str(out_dir)) for i in range(spec.n_clips)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_render_clip, tasks))
    else:
        chunks = [_render_clip(t) for t in tasks]

    entries = []
    for rec in (r for chunk in chunks for r in chunk):
        core = {k: rec.pop(k) for k in ("id", "video_path", "mos", "split")}
        entries.append(ManifestEntry(core["id"], core["video_path"], core["mos"], core["split"], rec))
    manifest = DatasetManifest(entries, spec.mos_range, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    (out_dir / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return manifest
