"""One stack branch: backbone + dual-branch head, plus checkpoint I/O."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import BackboneConfig, FragmentBackbone
from .errors import BadConfig
from .head import DualBranchHead, HeadConfig
from .sampler import DEFAULT_GRID, DEFAULT_PATCH, DEFAULT_T_FRAMES

CHECKPOINT_FORMAT = "sbvqa-branch"
CHECKPOINT_VERSION = 1


@dataclass
class SamplerConfig:
    grid_count: int = DEFAULT_GRID
    patch_size: int = DEFAULT_PATCH
    t_frames: int = DEFAULT_T_FRAMES

    def __post_init__(self):
        if min(self.grid_count, self.patch_size, self.t_frames) <= 0:
            raise BadConfig(f"sampler parameters must be positive: {self}")

    @property
    def fragment_size(self) -> int:
        return self.grid_count * self.patch_size


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    rank_weight: float = 0.3
    mse_weight: float = 1.0
    seed: int = 0


@dataclass
class BranchConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    name: str = ""

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.head.in_channels != self.backbone.out_channels:
            raise BadConfig(
                f"head expects {self.head.in_channels} channels, backbone emits {self.backbone.out_channels}"
            )
        if not self.name:
            self.name = self.backbone.variant_tag

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "BranchConfig":
        return cls(**d)


class BranchModel(nn.Module):
    def __init__(self, cfg: BranchConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = FragmentBackbone(cfg.backbone)
        self.head = DualBranchHead(cfg.head)

    def features(self, fragments: Tensor, grid_count: int) -> Tensor:
        return self.backbone(fragments, grid_count)

    def forward(self, fragments: Tensor, grid_count: int) -> Tensor:
        """``(B, T, G*P, G*P, 3)`` unit-scaled fragments -> ``(B,)`` scores."""
        return self.head(self.backbone(fragments, grid_count))


def save_checkpoint(path, model: BranchModel, extra: Optional[Dict[str, Any]] = None):
    """Write a versioned checkpoint: config, flat state dict and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "model",
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> Dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise BadConfig(f"{path} is not a branch checkpoint")
    if payload.get("version", 0) > CHECKPOINT_VERSION:
        raise BadConfig(f"{path} has unsupported version {payload['version']}")
    return payload


def load_model(payload: Dict[str, Any]) -> BranchModel:
    model = BranchModel(BranchConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def to_tensor(fragment_array: np.ndarray) -> Tensor:
    """Fragment array ``(T, S, S, 3)`` (uint8 or unit float) -> float32 tensor."""
    arr = np.asarray(fragment_array)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float32) / 255.0)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
