"""Correlation metrics and evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput, SBVQAError


def _validate(pred, label) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise DegenerateInput(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size < 2:
        raise DegenerateInput("need at least two items")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
        raise DegenerateInput("non-finite values")
    if np.all(p == p[0]) or np.all(y == y[0]):
        raise DegenerateInput("correlation is undefined for a constant vector")
    return p, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def plcc(pred, label) -> float:
    """Pearson linear correlation, no logistic remapping."""
    return _pearson(*_validate(pred, label))


def srcc(pred, label) -> float:
    """Spearman rank correlation; tied values share their average rank."""
    p, y = _validate(pred, label)
    return _pearson(rankdata(p), rankdata(y))


def main_score(srcc_value: float, plcc_value: float) -> float:
    return (srcc_value + plcc_value) / 2


@dataclass
class EvalReport:
    srcc: float
    plcc: float
    main_score: float
    n: int
    per_item: Optional[List[Tuple[str, float, float]]] = None

    @classmethod
    def from_predictions(cls, pred, label, ids: Optional[Sequence[str]] = None) -> "EvalReport":
        s, p = srcc(pred, label), plcc(pred, label)
        items = None
        if ids is not None:
            items = [(str(i), float(m), float(q)) for i, m, q in zip(ids, label, pred)]
        return cls(srcc=s, plcc=p, main_score=main_score(s, p), n=len(pred), per_item=items)

    def to_dict(self, include_items: bool = False) -> dict:
        d = asdict(self)
        if not include_items:
            d.pop("per_item")
        else:
            d["per_item"] = [{"id": i, "mos": m, "pred": q} for i, m, q in self.per_item or []]
        return d

    def table(self) -> str:
        return (
            f"{'n':>6} {'SRCC':>8} {'PLCC':>8} {'main':>8}\n"
            f"{self.n:>6d} {self.srcc:>8.4f} {self.plcc:>8.4f} {self.main_score:>8.4f}"
        )

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(include_items=csv_path is None and bool(self.per_item)), indent=2))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["id", "mos", "pred"])
                writer.writerows(self.per_item or [])


REPORT_SCHEMA = {
    "type": "object",
    "required": ["srcc", "plcc", "main_score", "n"],
    "properties": {
        "srcc": {"type": "number", "minimum": -1, "maximum": 1},
        "plcc": {"type": "number", "minimum": -1, "maximum": 1},
        "main_score": {"type": "number", "minimum": -1, "maximum": 1},
        "n": {"type": "integer", "minimum": 2},
        "per_item": {"type": "array"},
    },
}


class ItemError(SBVQAError):
    """A prediction failed; carries the offending item id."""

    def __init__(self, item_id: str, cause: Exception):
        super().__init__(f"item {item_id!r}: {cause}")
        self.item_id = item_id
        self.cause = cause


def evaluate(entries, predictor: Callable[[object], float], keep_items: bool = True) -> EvalReport:
    """Predict every manifest entry and score the split.

    ``predictor`` receives a manifest entry and returns a score on the MOS
    scale. Entries are processed in id order so the report is reproducible.
    """
    entries = sorted(entries, key=lambda e: e.id)
    if not entries:
        raise DegenerateInput("split is empty")
    preds = []
    for e in entries:
        try:
            preds.append(float(predictor(e)))
        except Exception as exc:
            raise ItemError(e.id, exc) from exc
    labels = [e.mos for e in entries]
    ids = [e.id for e in entries] if keep_items else None
    return EvalReport.from_predictions(np.array(preds), np.array(labels), ids)
