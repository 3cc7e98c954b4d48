"""Dataset manifests: JSON lines or CSV with id, video_path, mos and split."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ManifestError

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    video_path: str
    mos: float
    split: str = "train"
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"id": self.id, "video_path": self.video_path, "mos": self.mos, "split": self.split}
        d.update(self.extra)
        return d


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    mos_range: Tuple[float, float]
    root: Optional[Path] = None

    def __post_init__(self):
        lo, hi = (float(v) for v in self.mos_range)
        self.mos_range = (lo, hi)
        if not lo < hi:
            raise ManifestError(f"mos_range must satisfy lo < hi, got {self.mos_range}")
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)
            if e.split not in SPLITS:
                raise ManifestError(f"{e.id}: unknown split {e.split!r}")
            if not lo <= e.mos <= hi:
                raise ManifestError(f"{e.id}: mos {e.mos} outside {self.mos_range}")

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.video_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def normalize(self, mos) -> np.ndarray:
        lo, hi = self.mos_range
        return (np.asarray(mos, dtype=np.float64) - lo) / (hi - lo)

    def denormalize(self, value) -> np.ndarray:
        lo, hi = self.mos_range
        return np.asarray(value, dtype=np.float64) * (hi - lo) + lo

    def save(self, path):
        """Write JSON lines; the first line is a header carrying ``mos_range``."""
        path = Path(path)
        lines = [json.dumps({"mos_range": list(self.mos_range)})]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")


_CORE = ("id", "video_path", "mos", "split")


def _entry(record: dict, where: str) -> ManifestEntry:
    missing = [k for k in ("id", "video_path", "mos") if k not in record]
    if missing:
        raise ManifestError(f"{where}: missing fields {missing}")
    try:
        mos = float(record["mos"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: bad mos {record['mos']!r}") from exc
    extra = {k: v for k, v in record.items() if k not in _CORE}
    return ManifestEntry(str(record["id"]), str(record["video_path"]), mos,
                         str(record.get("split") or "train"), extra)


def load_manifest(path, mos_range: Optional[Tuple[float, float]] = None) -> DatasetManifest:
    """Read a ``.jsonl``/``.json`` or ``.csv`` manifest.

    The range comes from ``mos_range`` if given, else from a JSON header line,
    else from the observed label extremes.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    header_range = None
    entries: List[ManifestEntry] = []
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(("id", "video_path", "mos")) <= set(reader.fieldnames):
                raise ManifestError(f"{path}: CSV header must include id,video_path,mos[,split]")
            for n, row in enumerate(reader, start=2):
                entries.append(_entry(row, f"{path}:{n}"))
    else:
        for n, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: {exc}") from exc
            if "id" not in record and "mos_range" in record:
                header_range = tuple(record["mos_range"])
                continue
            entries.append(_entry(record, f"{path}:{n}"))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    rng = mos_range or header_range
    if rng is None:
        vals = [e.mos for e in entries]
        rng = (min(vals), max(vals))
    return DatasetManifest(entries, rng, root=path.parent)
