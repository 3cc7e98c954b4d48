"""Command line entry points: synth, train, eval, predict, pgc.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
failures while processing data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import (
    BadConfig,
    DecodeError,
    DegenerateInput,
    DivergedTraining,
    EmptyVideo,
    FrameTooSmall,
    IncompleteGrid,
    ManifestError,
    NoOverlap,
    PlanMismatch,
    ShapeMismatch,
    TooFewSamples,
)
from .metrics import EvalReport, ItemError

log = logging.getLogger("sbvqa")

EXIT_OK, EXIT_INPUT, EXIT_DATA = 0, 2, 3

_INPUT_ERRORS = (BadConfig, ManifestError, TooFewSamples, FileNotFoundError, NotADirectoryError,
                 PermissionError, json.JSONDecodeError)
_DATA_ERRORS = (DecodeError, EmptyVideo, FrameTooSmall, PlanMismatch, ShapeMismatch, DivergedTraining,
                IncompleteGrid, DegenerateInput, NoOverlap, ItemError)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, in one JSON document.

    ``train`` and ``sampler`` are conveniences: their keys override every
    branch's training settings and the stack's sampler respectively.
    ``seed`` reseeds the folds and each branch (branch ``k`` gets
    ``seed + 100 * k``).
    """

    manifest: Optional[str] = None
    out_dir: Optional[str] = None
    stack: Dict[str, Any] = field(default_factory=dict)
    sampler: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    jobs: int = 1
    split: str = "test"
    mos_range: Optional[List[float]] = None

    def stack_config(self):
        from .stacker import StackConfig

        d = json.loads(json.dumps(self.stack))
        if self.sampler:
            d["sampler"] = {**d.get("sampler", {}), **self.sampler}
        cfg = StackConfig.from_dict(d)
        for k, b in enumerate(cfg.branches):
            overrides = dict(self.train)
            if self.seed is not None:
                overrides["seed"] = self.seed + 100 * k
            if overrides:
                b.train = replace(b.train, **overrides)
        if self.seed is not None:
            cfg.fold_seed = self.seed
        return cfg

    def validate(self):
        if self.jobs < 1:
            raise BadConfig("jobs must be at least 1")
        if self.split not in ("train", "val", "test"):
            raise BadConfig(f"unknown split {self.split!r}")
        self.stack_config()

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(path: Optional[str], **overrides) -> RunConfig:
    data: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config not found: {p}")
        data = json.loads(p.read_text())
        if not isinstance(data, dict):
            raise BadConfig(f"{p}: config must be a JSON object")
        unknown = set(data) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise BadConfig(f"{p}: unknown keys {sorted(unknown)}")
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise BadConfig(str(exc)) from exc
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .datagen import SynthSpec, generate

    spec = SynthSpec.from_file(args.config) if args.config else SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if not args.out:
        raise UsageError("synth needs --out")
    generate(spec, args.out, jobs=args.jobs or 1)
    print(Path(args.out) / "manifest.jsonl")
    return EXIT_OK


def _manifest(cfg: RunConfig):
    from .manifest import load_manifest

    if not cfg.manifest:
        raise UsageError("no manifest given (use --manifest or the config's 'manifest')")
    return load_manifest(cfg.manifest, tuple(cfg.mos_range) if cfg.mos_range else None)


def cmd_train(args) -> int:
    from .stacker import train_ensemble

    cfg = load_run_config(args.config, manifest=args.manifest, out_dir=args.out, jobs=args.jobs, seed=args.seed)
    if not cfg.out_dir:
        raise UsageError("train needs an output directory (--out or 'out_dir')")
    stack = cfg.stack_config()
    manifest = _manifest(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    train_ensemble(stack, manifest, out, jobs=cfg.jobs, manifest_path=cfg.manifest)
    print(out)
    return EXIT_OK


_WORKER_ENSEMBLE = None


def _init_worker(directory: str):
    import torch

    global _WORKER_ENSEMBLE
    from .stacker import Ensemble

    torch.set_num_threads(1)
    _WORKER_ENSEMBLE = Ensemble.load(directory)


def _worker_features(path: str) -> np.ndarray:
    return _WORKER_ENSEMBLE.branch_features(path)


def batch_features(ensemble, ensemble_dir, paths: Sequence[str], ids: Sequence[str], jobs: int = 1) -> np.ndarray:
    """Branch features for many videos; ``jobs > 1`` spreads them over processes."""
    if jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(str(ensemble_dir),)) as pool:
            futures = [pool.submit(_worker_features, p) for p in paths]
            rows = []
            for i, fut in zip(ids, futures):
                try:
                    rows.append(fut.result())
                except (DecodeError, EmptyVideo) as exc:
                    raise ItemError(i, exc) from exc
            return np.array(rows)
    rows = []
    for i, p in zip(ids, paths):
        try:
            rows.append(ensemble.branch_features(p))
        except (DecodeError, EmptyVideo) as exc:
            raise ItemError(i, exc) from exc
    return np.array(rows)


def cmd_eval(args) -> int:
    from .stacker import Ensemble

    cfg = load_run_config(args.config, manifest=args.manifest, jobs=args.jobs, split=args.split)
    ens_dir = args.ensemble or cfg.out_dir
    if not ens_dir:
        raise UsageError("eval needs --ensemble")
    ensemble = Ensemble.load(ens_dir)
    manifest = _manifest(cfg)
    entries = sorted(manifest.split(cfg.split), key=lambda e: e.id)
    if not entries:
        raise DegenerateInput(f"split {cfg.split!r} is empty")
    paths = [str(manifest.resolve(e)) for e in entries]
    feats = batch_features(ensemble, ens_dir, paths, [e.id for e in entries], cfg.jobs)
    preds = ensemble.denormalize(ensemble.predict_normalized(feats))
    report = EvalReport.from_predictions(preds, np.array([e.mos for e in entries]), [e.id for e in entries])
    out = Path(args.out or Path(ens_dir) / f"eval_{cfg.split}")
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "per_item.csv")
    print(report.table())
    return EXIT_OK


def cmd_predict(args) -> int:
    from .stacker import Ensemble

    if not args.ensemble:
        raise UsageError("predict needs --ensemble")
    ensemble = Ensemble.load(args.ensemble)
    for video in args.videos:
        score = ensemble.predict(video)
        print(f"{score:.6f}" if len(args.videos) == 1 else f"{video}\t{score:.6f}")
    return EXIT_OK


def cmd_pgc(args) -> int:
    from . import pgc
    from .sampler import ingest_video
    from .stacker import Ensemble

    if not args.ensemble:
        raise UsageError("pgc needs --ensemble")
    if not (args.ladder or args.manifest or args.heatmap):
        raise UsageError("pgc needs --ladder, --manifest or --heatmap/--video")
    out = Path(args.out or Path(args.ensemble) / "pgc")
    # check inputs before loading anything heavy
    heatmap = pgc.load_heatmap(args.heatmap) if args.heatmap else None
    if heatmap is not None and not args.video:
        raise UsageError("--heatmap needs --video")
    ladder = None
    if args.ladder:
        ladder = pgc.load_ladder(args.ladder)
    elif args.manifest:
        from .manifest import load_manifest

        ladder = pgc.ladder_from_manifest(load_manifest(args.manifest), args.split or "test")

    ensemble = Ensemble.load(args.ensemble)
    out.mkdir(parents=True, exist_ok=True)
    if ladder is not None:
        report = pgc.ladder_study(ladder, ensemble)
        (out / "ladder_report.json").write_text(json.dumps(report.to_dict(), indent=2))
        if not args.no_plots:
            pgc.plot_ladder(report, out / "ladder.png")
        print(f"ladder: {len(report.clips)} clips, monotone fraction {report.fraction_positive:.3f}")
    if heatmap is not None:
        video = ingest_video(args.video, ensemble.policy)
        if video.frame_rate is None:
            if not args.frame_rate:
                raise UsageError("video has no frame rate; pass --frame-rate")
            video.frame_rate = args.frame_rate
        series = pgc.predict_segments(ensemble.predict, video, args.seg_len)
        result = pgc.correlate_heatmap(series, heatmap)
        result["series"] = series.to_dict()
        (out / f"heatmap_{heatmap.video_id}.json").write_text(json.dumps(result, indent=2))
        if not args.no_plots:
            pgc.plot_heatmap(series, heatmap, out / f"heatmap_{heatmap.video_id}.png")
        print(f"heatmap {heatmap.video_id}: srcc {result['srcc']:.4f} plcc {result['plcc']:.4f} n {result['n']}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--manifest", help="dataset manifest (.jsonl or .csv)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--seed", type=int)
    common.add_argument("--split", choices=("train", "val", "test"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sbvqa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a stacked ensemble")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a manifest split")
    s.add_argument("--ensemble")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="print the score of one or more videos")
    s.add_argument("--ensemble")
    s.add_argument("videos", nargs="+")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("pgc", parents=[common], help="ladder and heatmap studies")
    s.add_argument("--ensemble")
    s.add_argument("--ladder", help="CSV with clip_id,resolution,level,video_path")
    s.add_argument("--heatmap", help="heatmap JSON")
    s.add_argument("--video", help="video the heatmap belongs to")
    s.add_argument("--seg-len", type=float, default=2.0)
    s.add_argument("--frame-rate", type=float)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_pgc)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, *_INPUT_ERRORS) as exc:
        print(f"sbvqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _DATA_ERRORS as exc:
        print(f"sbvqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:  # unwritable output and the like
        print(f"sbvqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
