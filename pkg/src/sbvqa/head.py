"""Dual-branch patch-weighted quality head."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import BadConfig, ShapeMismatch

EPS = 1e-8

_ACTIVATIONS = {
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
}


@dataclass
class HeadConfig:
    in_channels: int = 768
    hidden_channels: int = 128
    weight_activation: str = "sigmoid"

    def __post_init__(self):
        if self.in_channels <= 0 or self.hidden_channels <= 0:
            raise BadConfig("head channels must be positive")
        if self.weight_activation not in _ACTIVATIONS:
            raise BadConfig(f"unknown weight activation {self.weight_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class PatchScores(NamedTuple):
    scores: Tensor   # (..., T', G, G)
    weights: Tensor  # (..., T', G, G), strictly positive


def combine(scores: Tensor, weights: Tensor, eps: float = EPS) -> Tensor:
    """Weighted mean of patch scores over the last three axes."""
    if scores.shape != weights.shape:
        raise ShapeMismatch(f"scores {tuple(scores.shape)} vs weights {tuple(weights.shape)}")
    dims = tuple(range(-min(3, scores.ndim), 0))
    return (weights * scores).sum(dim=dims) / (weights.sum(dim=dims) + eps)


def _branch(in_channels: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_channels, hidden, kernel_size=1),
        nn.GELU(),
        nn.Conv3d(hidden, 1, kernel_size=1),
    )


class DualBranchHead(nn.Module):
    """Feature map ``(B, T', G, G, C)`` -> one score per clip.

    Both branches are pointwise 3D convolutions, so every patch is scored and
    weighted independently; the clip score is the weight-normalized sum.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.score = _branch(cfg.in_channels, cfg.hidden_channels)
        self.weight = _branch(cfg.in_channels, cfg.hidden_channels)
        self._activation = _ACTIVATIONS[cfg.weight_activation]

    def _run(self, branch: nn.Sequential, feats: Tensor) -> Tensor:
        if feats.ndim != 5 or feats.shape[-1] != self.cfg.in_channels:
            raise ShapeMismatch(
                f"expected (B, T, G, G, {self.cfg.in_channels}) features, got {tuple(feats.shape)}"
            )
        return branch(feats.permute(0, 4, 1, 2, 3))[:, 0]

    def score_branch(self, feats: Tensor) -> Tensor:
        return self._run(self.score, feats)

    def weight_branch(self, feats: Tensor) -> Tensor:
        return self._activation(self._run(self.weight, feats))

    def patch_scores(self, feats: Tensor) -> PatchScores:
        return PatchScores(self.score_branch(feats), self.weight_branch(feats))

    def forward(self, feats: Tensor) -> Tensor:
        return combine(*self.patch_scores(feats))
