"""Two-stage stacked ensemble.

Stage one trains ``J`` copies of each of ``K`` branches, copy ``j`` seeing
every fold except ``j`` and predicting fold ``j``. The held-out predictions
form a ``N_train x K`` table that stage two fits a gradient-boosted regressor
on. At inference each branch contributes the mean of its ``J`` copies.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import (
    BadConfig,
    DegenerateTableWarning,
    DivergedTraining,
    IncompleteGrid,
    ManifestError,
    TooFewSamples,
)
from .manifest import DatasetManifest, ManifestEntry, load_manifest
from .model import (
    BranchConfig,
    BranchModel,
    SamplerConfig,
    load_model,
    read_checkpoint,
    save_checkpoint,
    to_tensor,
)
from .sampler import IngestionPolicy, VideoTensor, fragment_from_video, ingest_video

log = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "sbvqa-ensemble"
ENSEMBLE_VERSION = 1

DEFAULT_META_PARAMS = {"n_estimators": 200, "max_depth": 3, "learning_rate": 0.05, "monotone": True}


# ------------------------------------------------------------------- config


@dataclass
class StackConfig:
    branches: List[BranchConfig] = field(default_factory=lambda: [BranchConfig()])
    folds: int = 3
    meta_params: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_META_PARAMS))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fold_seed: int = 0
    fold_group_key: Optional[str] = None

    def __post_init__(self):
        self.branches = [b if isinstance(b, BranchConfig) else BranchConfig.from_dict(b) for b in self.branches]
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if not self.branches:
            raise BadConfig("need at least one branch")
        if self.folds < 2:
            raise BadConfig(f"need at least two folds, got {self.folds}")
        for b in self.branches:
            b.backbone.validate()
            if self.sampler.patch_size % b.backbone.spatial_reduction:
                raise BadConfig(
                    f"branch {b.name!r}: patch size {self.sampler.patch_size} is not a multiple "
                    f"of its final token size {b.backbone.spatial_reduction}"
                )

    @property
    def K(self) -> int:
        return len(self.branches)

    @property
    def J(self) -> int:
        return self.folds

    def to_dict(self) -> dict:
        return {
            "branches": [b.to_dict() for b in self.branches],
            "folds": self.folds,
            "meta_params": dict(self.meta_params),
            "sampler": asdict(self.sampler),
            "fold_seed": self.fold_seed,
            "fold_group_key": self.fold_group_key,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        return cls(**d)


# -------------------------------------------------------------------- folds


@dataclass
class FoldAssignment:
    J: int
    fold_of: Dict[str, int]
    seed: int

    def members(self, j: int) -> List[str]:
        return sorted(i for i, f in self.fold_of.items() if f == j)

    def sizes(self) -> List[int]:
        return [len(self.members(j)) for j in range(self.J)]

    def to_dict(self) -> dict:
        return {"J": self.J, "seed": self.seed, "fold_of": dict(sorted(self.fold_of.items()))}


def make_folds(
    entries: Union[DatasetManifest, Sequence[ManifestEntry]],
    J: int,
    seed: int = 0,
    group_key: Optional[str] = None,
) -> FoldAssignment:
    """MOS-stratified, near-equal partition of the training entries.

    Units are sorted by MOS (ties shuffled by ``seed``) and dealt out in
    consecutive blocks of ``J``; each block sends one unit to every fold in a
    random order, so fold sizes differ by at most one unit.

    With ``group_key`` the units are groups of entries sharing
    ``entry.extra[group_key]`` (e.g. variants of one source clip), ordered by
    their mean MOS, so no group straddles two folds.
    """
    if isinstance(entries, DatasetManifest):
        entries = entries.split("train")
    if J < 2:
        raise BadConfig(f"J must be at least 2, got {J}")
    groups: Dict[str, List[ManifestEntry]] = {}
    for e in entries:
        key = e.id
        if group_key is not None:
            if group_key not in e.extra:
                raise ManifestError(f"{e.id}: no {group_key!r} field to group folds by")
            key = str(e.extra[group_key])
        groups.setdefault(key, []).append(e)
    if len(groups) < J:
        raise TooFewSamples(f"{len(groups)} training units cannot fill {J} folds")

    rng = np.random.default_rng(seed)
    keys = sorted(groups)
    mos = {k: float(np.mean([e.mos for e in groups[k]])) for k in keys}
    tiebreak = dict(zip(keys, rng.permutation(len(keys))))
    order = sorted(keys, key=lambda k: (mos[k], tiebreak[k]))

    counts = np.zeros(J, dtype=int)
    fold_of = {}
    for start in range(0, len(order), J):
        block = order[start:start + J]
        # fill the currently smallest folds first, random among equals
        candidates = np.lexsort((rng.random(J), counts))[: len(block)]
        for key, fold in zip(block, rng.permutation(candidates)):
            for e in groups[key]:
                fold_of[e.id] = int(fold)
            counts[fold] += 1
    return FoldAssignment(J, fold_of, seed)


# ------------------------------------------------------------------- losses


def plcc_loss(pred: Tensor, target: Tensor, eps: float = 1e-8) -> Tensor:
    """``1 - PLCC`` over a batch; zero when the labels carry no variance."""
    pc, tc = pred - pred.mean(), target - target.mean()
    if float(tc.pow(2).sum()) < eps:
        return pred.new_zeros(())
    r = (pc * tc).sum() / (pc.pow(2).sum().sqrt() * tc.pow(2).sum().sqrt() + eps)
    return 1.0 - r


def rank_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean pairwise hinge on mis-ordered prediction pairs."""
    n = pred.shape[0]
    if n < 2:
        return pred.new_zeros(())
    order = torch.sign(target[:, None] - target[None, :])
    viol = F.relu(-(pred[:, None] - pred[None, :]) * order)
    return viol.sum() / (n * (n - 1))


def branch_loss(pred: Tensor, target: Tensor, cfg) -> Tensor:
    return (
        plcc_loss(pred, target)
        + cfg.rank_weight * rank_loss(pred, target)
        + cfg.mse_weight * F.mse_loss(pred, target)
    )


# ----------------------------------------------------------- copy training


class VideoStore:
    """Decoded, size-normalized clips keyed by manifest id."""

    def __init__(self, manifest: DatasetManifest, sampler: SamplerConfig):
        self.manifest = manifest
        self.policy = IngestionPolicy.for_sampler(sampler.grid_count, sampler.patch_size)
        self._videos: Dict[str, VideoTensor] = {}
        self._entries = manifest.by_id()

    def __getitem__(self, item_id: str) -> VideoTensor:
        if item_id not in self._videos:
            self._videos[item_id] = ingest_video(self.manifest.resolve(self._entries[item_id]), self.policy)
        return self._videos[item_id]


def _fragments(store, ids: Sequence[str], sampler: SamplerConfig, mode: str, seeds=None) -> Tensor:
    frags = []
    for n, i in enumerate(ids):
        frag = fragment_from_video(store[i], sampler.grid_count, sampler.patch_size, sampler.t_frames,
                                   mode=mode, seed=None if seeds is None else seeds[n])
        frags.append(to_tensor(frag.tensor))
    return torch.stack(frags)


@torch.no_grad()
def score_fragments(model: BranchModel, fragments: Tensor, grid_count: int, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = [model(fragments[i:i + batch_size], grid_count) for i in range(0, len(fragments), batch_size)]
    return torch.cat(out).double().numpy()


@dataclass
class CopyResult:
    branch: int
    fold: int
    model: BranchModel
    predictions: Dict[str, float]
    train_ids: List[str]
    losses: List[float]


def _lr_factor(step: int, total: int, warmup: int) -> float:
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def train_branch_copy(
    cfg: BranchConfig,
    manifest: DatasetManifest,
    folds: FoldAssignment,
    held_out: int,
    sampler: SamplerConfig,
    branch_index: int = 0,
    store: Optional[VideoStore] = None,
) -> CopyResult:
    """Train one copy on every fold except ``held_out`` and predict that fold.

    Predictions are in normalized MOS space. Raises :class:`DivergedTraining`
    if the loss becomes non-finite.
    """
    if not 0 <= held_out < folds.J:
        raise BadConfig(f"held-out fold {held_out} outside 0..{folds.J - 1}")
    store = store or VideoStore(manifest, sampler)
    tc = cfg.train
    entries = manifest.by_id()
    train_ids = sorted(i for i, f in folds.fold_of.items() if f != held_out)
    pred_ids = folds.members(held_out)
    targets = {i: float(manifest.normalize(entries[i].mos)) for i in train_ids}

    seq = np.random.SeedSequence([tc.seed, branch_index, held_out])
    torch_seed, data_seed = seq.generate_state(2)
    torch.manual_seed(int(torch_seed))
    rng = np.random.default_rng(int(data_seed))
    model = BranchModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)

    bs = max(2, min(tc.batch_size, len(train_ids)))
    steps_per_epoch = max(1, len(train_ids) // bs)
    total = tc.epochs * steps_per_epoch
    warmup = tc.warmup_epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, total, warmup))

    losses = []
    model.train()
    for epoch in range(tc.epochs):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            batch = order[b * bs:(b + 1) * bs]
            seeds = rng.integers(0, 2 ** 31, size=len(batch))
            x = _fragments(store, batch, sampler, "train", seeds)
            y = torch.tensor([targets[i] for i in batch], dtype=torch.float32)
            loss = branch_loss(model(x, sampler.grid_count), y, tc)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"branch {branch_index} fold {held_out}: loss {float(loss)} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            epoch_loss += loss.item()
        losses.append(epoch_loss / steps_per_epoch)
        log.debug("branch %d fold %d epoch %d loss %.4f", branch_index, held_out, epoch, losses[-1])

    preds = score_fragments(model, _fragments(store, pred_ids, sampler, "eval"), sampler.grid_count)
    return CopyResult(branch_index, held_out, model, dict(zip(pred_ids, map(float, preds))), train_ids, losses)


# ---------------------------------------------------------------- OOF table


@dataclass
class OOFTable:
    ids: List[str]
    matrix: np.ndarray  # (N, K)
    labels: np.ndarray  # (N,), normalized

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    def to_dict(self) -> dict:
        return {"ids": self.ids, "matrix": self.matrix.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OOFTable":
        return cls(list(d["ids"]), np.asarray(d["matrix"], dtype=float), np.asarray(d["labels"], dtype=float))


def assemble_oof(
    predictions: Sequence[Sequence[Optional[Dict[str, float]]]],
    folds: FoldAssignment,
    labels: Dict[str, float],
) -> OOFTable:
    """Build the meta-feature table from ``predictions[k][j]`` (id -> value).

    Every training id must be predicted by exactly one copy per branch, and
    that copy must be the one holding out the id's fold.
    """
    ids = sorted(folds.fold_of)
    K = len(predictions)
    if K == 0:
        raise IncompleteGrid("no branches")
    matrix = np.full((len(ids), K), np.nan)
    row = {i: r for r, i in enumerate(ids)}
    for k, per_fold in enumerate(predictions):
        if len(per_fold) != folds.J:
            raise IncompleteGrid(f"branch {k} has {len(per_fold)} copies, expected {folds.J}")
        for j, preds in enumerate(per_fold):
            if preds is None:
                raise IncompleteGrid(f"branch {k} fold {j} missing")
            if set(preds) != set(folds.members(j)):
                raise IncompleteGrid(f"branch {k} fold {j} predicted the wrong ids")
            for i, v in preds.items():
                if not np.isnan(matrix[row[i], k]):
                    raise IncompleteGrid(f"id {i} predicted twice by branch {k}")
                matrix[row[i], k] = v
    if np.isnan(matrix).any():
        raise IncompleteGrid("some training ids lack predictions")
    return OOFTable(ids, matrix, np.array([labels[i] for i in ids], dtype=float))


# --------------------------------------------------------------- meta model


class MetaModel:
    """Gradient-boosted trees on the K branch predictions."""

    def __init__(self, K: int, booster=None, constant: Optional[float] = None, params=None):
        self.K = K
        self.booster = booster
        self.constant = constant
        self.params = dict(params or {})

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.K:
            raise BadConfig(f"meta-model expects {self.K} features, got {x.shape[1]}")
        if self.constant is not None:
            return np.full(x.shape[0], self.constant)
        return self.booster.predict(x).astype(np.float64)

    def save(self, directory):
        directory = Path(directory)
        info = {"K": self.K, "params": self.params, "constant": self.constant,
                "format": ENSEMBLE_FORMAT, "version": ENSEMBLE_VERSION}
        if self.booster is not None:
            self.booster.save_model(str(directory / "meta_model.json"))
        (directory / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "MetaModel":
        import xgboost as xgb

        directory = Path(directory)
        info = json.loads((directory / "meta.json").read_text())
        booster = None
        if info["constant"] is None:
            booster = xgb.XGBRegressor()
            booster.load_model(str(directory / "meta_model.json"))
        return cls(info["K"], booster, info["constant"], info["params"])


def fit_meta(oof: OOFTable, meta_params: Optional[Dict[str, Any]] = None) -> MetaModel:
    """Fit the squared-error boosted-tree regressor on the OOF table."""
    import xgboost as xgb

    params = dict(DEFAULT_META_PARAMS)
    params.update(meta_params or {})
    if np.ptp(oof.labels) == 0:
        warnings.warn("constant labels; meta-model degenerates to a constant", DegenerateTableWarning)
        return MetaModel(oof.K, constant=float(oof.labels[0]), params=params)
    xgb_params = dict(params)
    # every input is itself a quality estimate, so the output may only rise with it
    if xgb_params.pop("monotone", False):
        xgb_params["monotone_constraints"] = "(" + ",".join(["1"] * oof.K) + ")"
    reg = xgb.XGBRegressor(objective="reg:squarederror", n_jobs=1, random_state=0, **xgb_params)
    reg.fit(oof.matrix, oof.labels)
    return MetaModel(oof.K, reg, params=params)


# ----------------------------------------------------------------- ensemble


class TableCopy:
    """A branch copy whose scores are fixed in advance, keyed by file name.

    Used to plug externally computed predictions into the stack.
    """

    def __init__(self, scores: Dict[str, float]):
        self.scores = dict(scores)

    def score(self, key: str) -> float:
        return self.scores[key]


class Ensemble:
    def __init__(self, config: StackConfig, copies, meta: MetaModel, mos_range: Tuple[float, float],
                 copy_meta=None):
        self.config = config
        self.copies = copies  # copies[k][j]
        self.meta = meta
        self.mos_range = tuple(float(v) for v in mos_range)
        self.copy_meta = copy_meta or [[{} for _ in row] for row in copies]
        if len(copies) != config.K or any(len(row) != config.J for row in copies):
            raise IncompleteGrid(f"expected a {config.K}x{config.J} grid of copies")
        self.policy = IngestionPolicy.for_sampler(config.sampler.grid_count, config.sampler.patch_size)

    @property
    def n_copies(self) -> int:
        return sum(len(row) for row in self.copies)

    def normalize(self, mos):
        lo, hi = self.mos_range
        return (np.asarray(mos, dtype=np.float64) - lo) / (hi - lo)

    def denormalize(self, value):
        lo, hi = self.mos_range
        return np.asarray(value, dtype=np.float64) * (hi - lo) + lo

    def branch_features(self, video: Union[str, Path, VideoTensor]) -> np.ndarray:
        """Mean normalized prediction of each branch's copies, shape ``(K,)``."""
        key = Path(video).name if isinstance(video, (str, Path)) else None
        fragment = None
        feats = np.empty(self.config.K)
        for k, row in enumerate(self.copies):
            vals = []
            for copy in row:
                if isinstance(copy, TableCopy):
                    if key is None:
                        raise BadConfig("table copies need a video path to look up")
                    vals.append(copy.score(key))
                    continue
                if fragment is None:
                    v = video if isinstance(video, VideoTensor) else ingest_video(video, self.policy)
                    s = self.config.sampler
                    frag = fragment_from_video(v, s.grid_count, s.patch_size, s.t_frames, mode="eval")
                    fragment = to_tensor(frag.tensor)[None]
                vals.append(float(score_fragments(copy, fragment, self.config.sampler.grid_count)[0]))
            feats[k] = float(np.mean(vals))
        return feats

    def predict_normalized(self, features: np.ndarray) -> np.ndarray:
        return np.clip(self.meta.predict(features), 0.0, 1.0)

    def predict(self, video) -> float:
        """Score on the MOS scale for a path or a :class:`VideoTensor`."""
        return float(self.denormalize(self.predict_normalized(self.branch_features(video)[None]))[0])

    # ---- persistence

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, row in enumerate(self.copies):
            for j, copy in enumerate(row):
                path = directory / f"branch_{k}" / f"fold_{j}.pt"
                if isinstance(copy, TableCopy):
                    save_table_copy(path, copy, self.copy_meta[k][j])
                else:
                    save_checkpoint(path, copy, self.copy_meta[k][j])
        self.meta.save(directory)
        write_stack_header(directory, self.config, self.mos_range)

    @classmethod
    def load(cls, directory) -> "Ensemble":
        directory = Path(directory)
        header_path = directory / "stack.json"
        if not header_path.is_file():
            raise BadConfig(f"{directory} is not an ensemble directory")
        header = json.loads(header_path.read_text())
        if header.get("format") != ENSEMBLE_FORMAT or header.get("version", 0) > ENSEMBLE_VERSION:
            raise BadConfig(f"unsupported ensemble header in {header_path}")
        config = StackConfig.from_dict(header["config"])
        copies, metas = [], []
        for k in range(config.K):
            row, mrow = [], []
            for j in range(config.J):
                path = directory / f"branch_{k}" / f"fold_{j}.pt"
                if not path.is_file():
                    raise IncompleteGrid(f"missing {path}")
                payload = read_checkpoint(path)
                row.append(TableCopy(payload["scores"]) if payload["kind"] == "table" else load_model(payload))
                mrow.append(payload.get("meta", {}))
            copies.append(row)
            metas.append(mrow)
        return cls(config, copies, MetaModel.load(directory), tuple(header["mos_range"]), metas)


def write_stack_header(directory, config: StackConfig, mos_range):
    header = {"format": ENSEMBLE_FORMAT, "version": ENSEMBLE_VERSION,
              "config": config.to_dict(), "mos_range": list(mos_range)}
    (Path(directory) / "stack.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def save_table_copy(path, copy: TableCopy, meta=None):
    from .model import CHECKPOINT_FORMAT, CHECKPOINT_VERSION

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": "table",
                "scores": dict(copy.scores), "meta": meta or {}}, path)


# ----------------------------------------------------------- orchestration


def _copy_job(args) -> Tuple[int, int]:
    """Worker entry point: train one copy and write its checkpoint."""
    config_dict, manifest_path, mos_range, folds_dict, k, j, out_dir = args
    torch.set_num_threads(1)
    config = StackConfig.from_dict(config_dict)
    manifest = load_manifest(manifest_path, tuple(mos_range))
    folds = FoldAssignment(folds_dict["J"], folds_dict["fold_of"], folds_dict["seed"])
    res = train_branch_copy(config.branches[k], manifest, folds, j, config.sampler, k)
    _save_copy(Path(out_dir), res, folds)
    return k, j


def _save_copy(out_dir: Path, res: CopyResult, folds: FoldAssignment):
    save_checkpoint(out_dir / f"branch_{res.branch}" / f"fold_{res.fold}.pt", res.model, {
        "branch": res.branch, "fold": res.fold, "train_ids": res.train_ids,
        "predictions": res.predictions, "losses": res.losses,
        "folds_hash": _folds_hash(folds),
    })


def _folds_hash(folds: FoldAssignment) -> str:
    import hashlib

    return hashlib.sha1(json.dumps(folds.to_dict(), sort_keys=True).encode()).hexdigest()


def _completed(path: Path, folds: FoldAssignment, cfg: BranchConfig) -> Optional[Dict[str, Any]]:
    """Checkpoint payload if ``path`` holds a finished copy for this folds/config pair."""
    if not path.is_file():
        return None
    try:
        payload = read_checkpoint(path)
    except Exception:
        return None
    meta = payload.get("meta", {})
    if meta.get("folds_hash") != _folds_hash(folds) or "predictions" not in meta:
        return None
    same = json.dumps(payload.get("config"), sort_keys=True) == json.dumps(cfg.to_dict(), sort_keys=True)
    return payload if same else None


def train_ensemble(
    config: StackConfig,
    manifest: DatasetManifest,
    out_dir,
    jobs: int = 1,
    manifest_path=None,
) -> Ensemble:
    """Run both training stages and write the ensemble to ``out_dir``.

    Copies whose checkpoints already exist for the same fold assignment are
    reused, so an interrupted run resumes where it stopped. With ``jobs > 1``
    copies train in worker processes, which requires ``manifest_path``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = make_folds(manifest, config.J, config.fold_seed, config.fold_group_key)
    (out_dir / "folds.json").write_text(json.dumps(folds.to_dict(), indent=2))
    write_stack_header(out_dir, config, manifest.mos_range)

    todo = [(k, j) for k in range(config.K) for j in range(config.J)
            if _completed(out_dir / f"branch_{k}" / f"fold_{j}.pt", folds, config.branches[k]) is None]
    log.info("%d of %d copies to train", len(todo), config.K * config.J)
    if jobs > 1 and len(todo) > 1:
        if manifest_path is None:
            raise BadConfig("parallel training needs the manifest path")
        args = [(config.to_dict(), str(manifest_path), manifest.mos_range, folds.to_dict(), k, j, str(out_dir))
                for k, j in todo]
        with ProcessPoolExecutor(jobs) as pool:
            for k, j in pool.map(_copy_job, args):
                log.info("copy branch %d fold %d done", k, j)
    else:
        store = VideoStore(manifest, config.sampler)
        for k, j in todo:
            res = train_branch_copy(config.branches[k], manifest, folds, j, config.sampler, k, store)
            _save_copy(out_dir, res, folds)
            log.info("copy branch %d fold %d done, final loss %.4f", k, j, res.losses[-1])

    copies, metas, preds = [], [], []
    for k in range(config.K):
        row, mrow, prow = [], [], []
        for j in range(config.J):
            payload = _completed(out_dir / f"branch_{k}" / f"fold_{j}.pt", folds, config.branches[k])
            if payload is None:
                raise IncompleteGrid(f"branch {k} fold {j} did not produce a checkpoint")
            row.append(load_model(payload))
            mrow.append(payload["meta"])
            prow.append(payload["meta"]["predictions"])
        copies.append(row)
        metas.append(mrow)
        preds.append(prow)

    labels = {e.id: float(manifest.normalize(e.mos)) for e in manifest.split("train")}
    oof = assemble_oof(preds, folds, labels)
    (out_dir / "oof.json").write_text(json.dumps(oof.to_dict()))
    meta = fit_meta(oof, config.meta_params)
    ensemble = Ensemble(config, copies, meta, manifest.mos_range, metas)
    meta.save(out_dir)
    return ensemble


def check_oof_partition(ensemble: Ensemble, folds: FoldAssignment) -> None:
    """Raise ``IncompleteGrid`` unless every id is predicted once per branch by a copy that never trained on it."""
    for k, row in enumerate(ensemble.copy_meta):
        seen: Dict[str, int] = {}
        for j, meta in enumerate(row):
            trained = set(meta["train_ids"])
            for i in meta["predictions"]:
                if i in trained:
                    raise IncompleteGrid(f"branch {k} fold {j} predicted {i} after training on it")
                if i in seen:
                    raise IncompleteGrid(f"branch {k}: {i} predicted by folds {seen[i]} and {j}")
                seen[i] = j
        if set(seen) != set(folds.fold_of):
            raise IncompleteGrid(f"branch {k} does not cover the training split")
