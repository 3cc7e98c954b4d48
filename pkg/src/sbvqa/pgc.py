"""Segment-level scoring, heatmap correlation and bitrate-ladder studies."""
from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import block_dct_quantize
from .errors import ConstantSeriesWarning, DegenerateInput, EmptyVideo, ManifestError, NoOverlap
from .metrics import plcc, srcc
from .sampler import VideoTensor

DEFAULT_SEG_LEN = 2.0

_TOL = 1e-9


# ----------------------------------------------------------------- segments


def segment_bounds(n_frames: int, frame_rate: float, seg_len_sec: float = DEFAULT_SEG_LEN) -> List[Tuple[int, int]]:
    """Frame ranges ``[a, b)`` covering ``0..n_frames`` with no gaps.

    A trailing remainder longer than half a segment becomes its own segment;
    anything up to half a segment is merged into the previous one.
    """
    if seg_len_sec <= 0:
        raise ValueError(f"seg_len_sec must be positive, got {seg_len_sec}")
    if n_frames < 1:
        raise EmptyVideo("video has no frames")
    if not frame_rate or frame_rate <= 0:
        raise ValueError("segmenting needs a positive frame rate")
    step = max(1, int(round(seg_len_sec * frame_rate)))
    full, rem = divmod(n_frames, step)
    bounds = [(i * step, (i + 1) * step) for i in range(full)]
    if rem:
        if not bounds or 2 * rem > step:
            bounds.append((full * step, n_frames))
        else:
            a, _ = bounds.pop()
            bounds.append((a, n_frames))
    return bounds


def segment_video(video: VideoTensor, seg_len_sec: float = DEFAULT_SEG_LEN,
                  frame_rate: Optional[float] = None) -> List[VideoTensor]:
    fps = frame_rate or video.frame_rate
    bounds = segment_bounds(video.dims[0], fps, seg_len_sec)
    return [VideoTensor(video.frames[a:b], fps) for a, b in bounds]


def minmax_scale(series) -> np.ndarray:
    """Map to [0, 1] by min and max. A constant series maps to 0.5 with a warning."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateInput("need at least two values to scale")
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("constant series; returning 0.5 everywhere", ConstantSeriesWarning, stacklevel=2)
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


# ------------------------------------------------------------------ series


@dataclass
class Segment:
    start: float
    end: float
    value: float


def _check_timeline(segments: Sequence[Segment], what: str):
    if not segments:
        raise ManifestError(f"{what}: no segments")
    for s in segments:
        if not s.end > s.start:
            raise ManifestError(f"{what}: segment [{s.start}, {s.end}] is empty")
    for a, b in zip(segments, segments[1:]):
        if abs(b.start - a.end) > _TOL:
            raise ManifestError(f"{what}: segments must be contiguous, gap or overlap at {a.end}")


@dataclass
class HeatmapSeries:
    video_id: str
    segments: List[Segment]

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(**s) for s in self.segments]
        _check_timeline(self.segments, f"heatmap {self.video_id}")
        for s in self.segments:
            if not 0.0 <= s.value <= 1.0:
                raise ManifestError(f"heatmap {self.video_id}: value {s.value} outside [0, 1]")

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.segments])

    def resample(self, bounds: Sequence[Tuple[float, float]]) -> np.ndarray:
        """Time-weighted mean over each target interval; NaN where nothing overlaps."""
        starts = np.array([s.start for s in self.segments])
        ends = np.array([s.end for s in self.segments])
        vals = self.values
        out = np.full(len(bounds), np.nan)
        for i, (a, b) in enumerate(bounds):
            w = np.clip(np.minimum(ends, b) - np.maximum(starts, a), 0.0, None)
            if w.sum() > 0:
                out[i] = float(np.dot(w, vals) / w.sum())
        return out

    def to_dict(self) -> dict:
        return {"video_id": self.video_id,
                "segments": [{"start": s.start, "end": s.end, "value": s.value} for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "HeatmapSeries":
        try:
            segs = [Segment(float(s["start"]), float(s["end"]), float(s["value"])) for s in d["segments"]]
            return cls(str(d["video_id"]), segs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed heatmap: {exc}") from exc


def load_heatmap(path) -> HeatmapSeries:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"heatmap not found: {path}")
    try:
        return HeatmapSeries.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def save_heatmap(path, hm: HeatmapSeries):
    Path(path).write_text(json.dumps(hm.to_dict(), indent=2))


@dataclass
class SegmentScoreSeries:
    starts: np.ndarray
    ends: np.ndarray
    raw_pred: np.ndarray
    scaled_pred: np.ndarray = None

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64)
        self.ends = np.asarray(self.ends, dtype=np.float64)
        self.raw_pred = np.asarray(self.raw_pred, dtype=np.float64)
        if self.scaled_pred is None:
            self.scaled_pred = minmax_scale(self.raw_pred)
        self.scaled_pred = np.asarray(self.scaled_pred, dtype=np.float64)
        n = len(self.raw_pred)
        if not (len(self.starts) == len(self.ends) == len(self.scaled_pred) == n):
            raise ManifestError("segment series fields must have equal length")
        _check_timeline([Segment(a, b, 0.0) for a, b in zip(self.starts, self.ends)], "prediction series")

    @property
    def bounds(self) -> List[Tuple[float, float]]:
        return list(zip(self.starts.tolist(), self.ends.tolist()))

    def to_dict(self) -> dict:
        return {"segments": [
            {"start": a, "end": b, "raw_pred": float(r), "scaled_pred": float(s)}
            for (a, b), r, s in zip(self.bounds, self.raw_pred, self.scaled_pred)
        ]}


def predict_segments(predictor: Callable[[VideoTensor], float], video: VideoTensor,
                     seg_len_sec: float = DEFAULT_SEG_LEN) -> SegmentScoreSeries:
    """Score each segment of ``video`` and min-max scale the curve."""
    fps = video.frame_rate
    bounds = segment_bounds(video.dims[0], fps, seg_len_sec)
    raw = [float(predictor(VideoTensor(video.frames[a:b], fps))) for a, b in bounds]
    return SegmentScoreSeries([a / fps for a, _ in bounds], [b / fps for _, b in bounds], raw)


def correlate_heatmap(preds: SegmentScoreSeries, hm: HeatmapSeries) -> dict:
    """Correlate scaled predictions with the heatmap resampled onto prediction segments."""
    resampled = hm.resample(preds.bounds)
    keep = ~np.isnan(resampled)
    if not keep.any():
        raise NoOverlap(f"heatmap {hm.video_id} does not overlap the prediction timeline")
    p, h = preds.scaled_pred[keep], resampled[keep]
    pairs = [{"start": a, "end": b, "pred": float(x), "heatmap": float(y)}
             for (a, b), x, y in zip(np.array(preds.bounds)[keep].tolist(), p, h)]
    return {"video_id": hm.video_id, "srcc": srcc(p, h), "plcc": plcc(p, h), "n": int(keep.sum()),
            "aligned_pairs": pairs}


# ------------------------------------------------------------------ ladders


@dataclass
class LadderEntry:
    clip_id: str
    resolution: str
    level: float
    video_path: str


def _validate_ladder(entries: Sequence[LadderEntry]) -> Dict[Tuple[str, str], List[LadderEntry]]:
    groups: Dict[Tuple[str, str], List[LadderEntry]] = defaultdict(list)
    for e in entries:
        groups[(e.clip_id, e.resolution)].append(e)
    for key, members in groups.items():
        levels = [m.level for m in members]
        if len(set(levels)) != len(levels):
            raise ManifestError(f"ladder {key}: duplicate levels {sorted(levels)}")
        if len(levels) < 2:
            raise ManifestError(f"ladder {key}: need at least two levels")
        members.sort(key=lambda m: m.level)
    return dict(sorted(groups.items()))


def load_ladder(path) -> List[LadderEntry]:
    """CSV with columns clip_id,resolution,level,video_path; relative paths resolve beside the file."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"ladder manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"clip_id", "resolution", "level", "video_path"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ManifestError(f"{path}: header must be clip_id,resolution,level,video_path")
        for n, row in enumerate(reader, start=2):
            try:
                level = float(row["level"])
            except ValueError as exc:
                raise ManifestError(f"{path}:{n}: bad level {row['level']!r}") from exc
            vp = Path(row["video_path"])
            if not vp.is_absolute():
                vp = path.parent / vp
            entries.append(LadderEntry(row["clip_id"], row["resolution"], level, str(vp)))
    _validate_ladder(entries)
    return entries


def ladder_from_manifest(manifest, split: str = "test") -> List[LadderEntry]:
    """Ladder entries from a generated dataset, which records ``clip_id`` and ``level`` per item."""
    out = []
    for e in manifest.split(split):
        if "clip_id" not in e.extra or "level" not in e.extra:
            raise ManifestError(f"{e.id}: manifest entry lacks clip_id/level")
        out.append(LadderEntry(str(e.extra["clip_id"]), str(e.extra.get("resolution", "native")),
                               float(e.extra["level"]), str(manifest.resolve(e))))
    return out


@dataclass
class LadderReport:
    clips: List[dict] = field(default_factory=list)

    @property
    def fraction_positive(self) -> float:
        if not self.clips:
            return 0.0
        return float(np.mean([c["srcc"] is not None and c["srcc"] > 0 for c in self.clips]))

    def to_dict(self) -> dict:
        return {"fraction_positive": self.fraction_positive, "n_clips": len(self.clips), "clips": self.clips}


def ladder_study(entries: Sequence[LadderEntry], predictor) -> LadderReport:
    """Per (clip, resolution): SRCC between level order and predicted score.

    ``predictor`` is an object with ``predict(path)`` (such as an ensemble)
    or a plain callable on the video path. A clip whose predictions are all
    equal gets ``srcc = None`` and counts as not monotone.
    """
    fn = predictor.predict if hasattr(predictor, "predict") else predictor
    report = LadderReport()
    for (clip, res), members in _validate_ladder(entries).items():
        levels = [m.level for m in members]
        preds = [float(fn(m.video_path)) for m in members]
        try:
            rho = srcc(preds, levels)
        except DegenerateInput:
            rho = None
        report.clips.append({"clip_id": clip, "resolution": res, "levels": levels,
                             "predictions": preds, "srcc": rho})
    return report


# ------------------------------------------------------------ compression


def synth_compress(video: VideoTensor, strength: float, seed: int = 0) -> VideoTensor:
    """Stand-in for re-encoding at a lower bitrate: DCT quantization plus noise."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    if strength == 0:
        return VideoTensor(video.frames.copy(), video.frame_rate)
    src = video.frames
    is_u8 = src.dtype == np.uint8
    x = src.astype(np.float64) / 255.0 if is_u8 else src.astype(np.float64)
    rng = np.random.default_rng(seed)
    out = block_dct_quantize(x, 0.5 * strength)
    out = np.clip(out + rng.normal(0.0, 0.04 * strength, size=out.shape), 0.0, 1.0)
    if is_u8:
        out = np.round(out * 255.0).astype(np.uint8)
    else:
        out = out.astype(src.dtype)
    return VideoTensor(out, video.frame_rate)


def psnr(a: np.ndarray, b: np.ndarray, peak: Optional[float] = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if peak is None:
        peak = 255.0 if np.asarray(a).max() > 1.0 else 1.0
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak ** 2 / mse)


# ------------------------------------------------------------------- plots


def plot_heatmap(preds: SegmentScoreSeries, hm: HeatmapSeries, path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3))
    hx = [s.start for s in hm.segments] + [hm.segments[-1].end]
    ax.stairs(hm.values, hx, fill=True, alpha=0.3, label="heatmap")
    px = list(preds.starts) + [preds.ends[-1]]
    ax.stairs(preds.scaled_pred, px, linewidth=2, label="predicted (scaled)")
    ax.set_xlabel("time (s)")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    ax.set_title(title or hm.video_id)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ladder(report: LadderReport, path, max_clips: int = 12):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    clips = report.clips[:max_clips]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(clips) + 2), 3))
    n_lv = max(len(c["levels"]) for c in clips) if clips else 1
    width = 0.8 / n_lv
    for i, c in enumerate(clips):
        for r, p in enumerate(c["predictions"]):
            ax.bar(i + (r - (n_lv - 1) / 2) * width, p, width, color=plt.cm.viridis(r / max(1, n_lv - 1)))
    ax.set_xticks(range(len(clips)))
    ax.set_xticklabels([c["clip_id"] for c in clips], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("predicted score")
    ax.set_title(f"monotone fraction {report.fraction_positive:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
