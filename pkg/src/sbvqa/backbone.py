"""Fragment attention backbone with gated relative position biases.

The trunk is a shrunken 3D Swin transformer. Each window attention keeps two
relative-position bias tables: one applied to token pairs that come from the
same mini-patch of the fragment, one applied to pairs that straddle a patch
seam. Which table a pair uses is decided by a boolean gate mask computed from
token coordinates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import BadConfig, ShapeMismatch

Triple = Tuple[int, int, int]

# ImageNet statistics, applied to unit-scaled RGB.
_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneConfig:
    window: Triple = (8, 7, 7)
    depths: Tuple[int, ...] = (2, 2)
    embed_dims: Tuple[int, ...] = (96, 768)
    heads: Tuple[int, ...] = (3, 12)
    patch_embed: Triple = (2, 4, 4)
    mlp_ratio: float = 4.0
    shift: bool = True
    dropout: float = 0.0
    variant_tag: str = "fanet"

    def __post_init__(self):
        self.window = tuple(int(v) for v in self.window)
        self.depths = tuple(int(v) for v in self.depths)
        self.embed_dims = tuple(int(v) for v in self.embed_dims)
        self.heads = tuple(int(v) for v in self.heads)
        self.patch_embed = tuple(int(v) for v in self.patch_embed)
        self.validate()

    def validate(self):
        if len(self.window) != 3 or min(self.window) <= 0:
            raise BadConfig(f"window must be three positive ints, got {self.window}")
        if len(self.patch_embed) != 3 or min(self.patch_embed) <= 0:
            raise BadConfig(f"patch_embed must be three positive ints, got {self.patch_embed}")
        n = len(self.depths)
        if n == 0 or len(self.embed_dims) != n or len(self.heads) != n:
            raise BadConfig("depths, embed_dims and heads must have one entry per stage")
        if min(self.depths) <= 0 or min(self.embed_dims) <= 0 or min(self.heads) <= 0:
            raise BadConfig("stage sizes must be positive")
        for dim, h in zip(self.embed_dims, self.heads):
            if dim % h:
                raise BadConfig(f"embed dim {dim} not divisible by {h} heads")

    @property
    def out_channels(self) -> int:
        return self.embed_dims[-1]

    @property
    def spatial_reduction(self) -> int:
        """Pixels per token side at the last stage."""
        return self.patch_embed[1] * 2 ** (len(self.depths) - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    @classmethod
    def faster_variant(cls, **overrides) -> "BackboneConfig":
        """Lighter branch: shorter temporal window and coarser patch embedding."""
        base = dict(window=(4, 7, 7), patch_embed=(2, 8, 8), variant_tag="faster")
        base.update(overrides)
        return cls(**base)


# ------------------------------------------------------------ index helpers


def relative_position_index(window: Triple, table_window: Optional[Triple] = None) -> Tensor:
    """Map every token pair of ``window`` to a row of a bias table.

    The table is laid out for ``table_window`` (defaults to ``window``) so a
    window clipped to a small feature map reuses the full-size table.
    """
    table_window = table_window or window
    coords = torch.stack(
        torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")
    ).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    wt, wh, ww = table_window
    rel = rel + torch.tensor([wt - 1, wh - 1, ww - 1])
    return rel[..., 0] * (2 * wh - 1) * (2 * ww - 1) + rel[..., 1] * (2 * ww - 1) + rel[..., 2]


def bias_table_size(window: Triple) -> int:
    wt, wh, ww = window
    return (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1)


def _window_partition(x: Tensor, window: Triple) -> Tensor:
    """(B, T, H, W, C) -> (B, nW, N, C); dims must be multiples of ``window``."""
    b, t, h, w, c = x.shape
    wt, wh, ww = window
    x = x.view(b, t // wt, wt, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, -1, wt * wh * ww, c)


def _window_reverse(x: Tensor, window: Triple, size: Triple) -> Tensor:
    b, _, _, c = x.shape
    wt, wh, ww = window
    t, h, w = size
    x = x.view(b, t // wt, h // wh, w // ww, wt, wh, ww, c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, t, h, w, c)


def _partition_labels(labels: Tensor, window: Triple) -> Tensor:
    return _window_partition(labels[None, ..., None], window)[0, ..., 0]


def _patch_labels(size: Triple, tokens_per_patch: Triple) -> Tensor:
    t, h, w = size
    pt, ph, pw = tokens_per_patch
    ti = torch.arange(t) // pt
    hi = torch.arange(h) // ph
    wi = torch.arange(w) // pw
    n_h, n_w = int(hi.max()) + 1, int(wi.max()) + 1
    return (ti[:, None, None] * n_h + hi[None, :, None]) * n_w + wi[None, None, :]


@lru_cache(maxsize=64)
def gate_masks(size: Triple, window: Triple, tokens_per_patch: Triple, shift: Triple = (0, 0, 0)) -> Tensor:
    """Per-window gate masks for a padded token grid of ``size``.

    Returns a bool tensor ``(nW, N, N)``; entry ``(w, i, j)`` is true iff tokens
    ``i`` and ``j`` of window ``w`` lie in the same mini-patch. The shift is the
    cyclic roll applied to the features before partitioning.
    """
    labels = _patch_labels(size, tokens_per_patch)
    if any(shift):
        labels = torch.roll(labels, shifts=tuple(-s for s in shift), dims=(0, 1, 2))
    lw = _partition_labels(labels, window)
    return lw[:, :, None] == lw[:, None, :]


def build_gate_mask(window: Triple, tokens_per_patch: Triple) -> Tensor:
    """Gate mask ``(N, N)`` for a single window anchored at a patch corner."""
    if min(window) <= 0 or min(tokens_per_patch) <= 0:
        raise BadConfig(f"window {window} and tokens_per_patch {tokens_per_patch} must be positive")
    return gate_masks(tuple(window), tuple(window), tuple(tokens_per_patch))[0]


@lru_cache(maxsize=64)
def shift_region_mask(size: Triple, window: Triple, shift: Triple) -> Tensor:
    """Additive mask (nW, N, N) keeping rolled-in regions from attending to each other."""
    regions = torch.zeros(size, dtype=torch.long)
    count = 0
    for ts in ((0, -window[0]), (-window[0], -shift[0]), (-shift[0], None)):
        for hs in ((0, -window[1]), (-window[1], -shift[1]), (-shift[1], None)):
            for ws in ((0, -window[2]), (-window[2], -shift[2]), (-shift[2], None)):
                regions[slice(*ts), slice(*hs), slice(*ws)] = count
                count += 1
    rw = _partition_labels(regions, window)
    diff = rw[:, :, None] != rw[:, None, :]
    return torch.zeros(diff.shape).masked_fill(diff, -100.0)


# --------------------------------------------------------------- attention


def grpb_attention(
    x: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Optional[Tensor],
    proj_weight: Tensor,
    proj_bias: Optional[Tensor],
    bias_intra: Tensor,
    bias_cross: Tensor,
    rel_index: Tensor,
    gate: Tensor,
    num_heads: int,
    attn_mask: Optional[Tensor] = None,
    dropout: float = 0.0,
    training: bool = False,
) -> Tensor:
    """Multi-head window self-attention with a gated position bias.

    Args:
        x: tokens ``(..., N, C)``; ``N`` must equal the window volume.
        bias_intra, bias_cross: bias tables ``(n_rel, heads)``.
        rel_index: ``(N, N)`` rows into the bias tables.
        gate: bool ``(N, N)`` or ``(nW, N, N)`` broadcastable against the
            window axis of ``x``; true selects ``bias_intra``.
        attn_mask: optional additive mask broadcastable like ``gate``.
    """
    *lead, n, c = x.shape
    if rel_index.shape != (n, n) or gate.shape[-2:] != (n, n):
        raise ShapeMismatch(f"{n} tokens do not match index {tuple(rel_index.shape)} / gate {tuple(gate.shape)}")
    if c % num_heads:
        raise ShapeMismatch(f"channels {c} not divisible by {num_heads} heads")
    d = c // num_heads

    qkv = F.linear(x, qkv_weight, qkv_bias)
    qkv = qkv.view(*lead, n, 3, num_heads, d).movedim(-3, 0).transpose(-2, -3)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (..., heads, N, d)
    attn = (q * d ** -0.5) @ k.transpose(-2, -1)

    intra = bias_intra[rel_index.reshape(-1)].view(n, n, num_heads).permute(2, 0, 1)
    cross = bias_cross[rel_index.reshape(-1)].view(n, n, num_heads).permute(2, 0, 1)
    attn = attn + torch.where(gate.unsqueeze(-3), intra, cross)
    if attn_mask is not None:
        attn = attn + attn_mask.unsqueeze(-3)
    attn = attn.softmax(dim=-1)
    attn = F.dropout(attn, p=dropout, training=training)

    out = (attn @ v).transpose(-2, -3).reshape(*lead, n, c)
    return F.linear(out, proj_weight, proj_bias)


class GatedWindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: Triple, dropout: float = 0.0):
        super().__init__()
        self.dim, self.num_heads, self.window, self.dropout = dim, num_heads, tuple(window), dropout
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        size = bias_table_size(self.window)
        self.bias_intra = nn.Parameter(torch.zeros(size, num_heads))
        self.bias_cross = nn.Parameter(torch.zeros(size, num_heads))
        nn.init.trunc_normal_(self.bias_intra, std=0.02)
        nn.init.trunc_normal_(self.bias_cross, std=0.02)
        self._index_cache = {}

    def rel_index(self, window: Triple, device) -> Tensor:
        key = (tuple(window), str(device))
        if key not in self._index_cache:
            self._index_cache[key] = relative_position_index(tuple(window), self.window).to(device)
        return self._index_cache[key]

    def forward(self, x: Tensor, gate: Tensor, window: Triple, attn_mask: Optional[Tensor] = None) -> Tensor:
        return grpb_attention(
            x,
            self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.bias_intra, self.bias_cross,
            self.rel_index(window, x.device), gate, self.num_heads,
            attn_mask=attn_mask, dropout=self.dropout, training=self.training,
        )


class GRPBBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: Triple, shifted: bool,
                 mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.window = tuple(window)
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = GatedWindowAttention(dim, num_heads, window, dropout)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout),
                                 nn.Linear(hidden, dim), nn.Dropout(dropout))

    def _geometry(self, size: Triple) -> Tuple[Triple, Triple]:
        window = tuple(min(w, s) for w, s in zip(self.window, size))
        if self.shifted:
            shift = tuple(0 if s <= w else w // 2 for w, s in zip(self.window, size))
        else:
            shift = (0, 0, 0)
        return window, shift

    def forward(self, x: Tensor, tokens_per_patch: Triple) -> Tensor:
        b, t, h, w, c = x.shape
        window, shift = self._geometry((t, h, w))
        shortcut = x
        x = self.norm1(x)
        pad = [(wd - s % wd) % wd for wd, s in zip(window, (t, h, w))]
        if any(pad):
            x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        size = (t + pad[0], h + pad[1], w + pad[2])
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))

        gate = gate_masks(size, window, tuple(tokens_per_patch), shift).to(x.device)
        mask = shift_region_mask(size, window, shift).to(x) if any(shift) else None
        y = self.attn(_window_partition(x, window), gate, window, mask)
        y = _window_reverse(y, window, size)

        if any(shift):
            y = torch.roll(y, shifts=shift, dims=(1, 2, 3))
        y = y[:, :t, :h, :w].contiguous()
        x = shortcut + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate 2x2 spatial neighbours and project to ``out_dim``."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w, _ = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x = torch.cat([x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2],
                       x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class FragmentBackbone(nn.Module):
    """Fragment ``(B, T, G*P, G*P, 3)`` -> feature map ``(B, T', G, G, C_feat)``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Conv3d(3, cfg.embed_dims[0], kernel_size=cfg.patch_embed, stride=cfg.patch_embed)
        self.embed_norm = nn.LayerNorm(cfg.embed_dims[0])
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i, (depth, dim, heads) in enumerate(zip(cfg.depths, cfg.embed_dims, cfg.heads)):
            if i > 0:
                self.merges.append(PatchMerging(cfg.embed_dims[i - 1], dim))
            self.stages.append(nn.ModuleList(
                GRPBBlock(dim, heads, cfg.window, shifted=cfg.shift and j % 2 == 1,
                          mlp_ratio=cfg.mlp_ratio, dropout=cfg.dropout)
                for j in range(depth)
            ))
        self.norm = nn.LayerNorm(cfg.out_channels)
        self.register_buffer("pixel_mean", torch.tensor(_MEAN).view(1, 3, 1, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(_STD).view(1, 3, 1, 1, 1), persistent=False)
        self.apply(_init_weights)

    def tokens_per_patch(self, patch_size: int) -> List[Triple]:
        """Token extent of one mini-patch at every stage (temporal extent unbounded)."""
        out = []
        px = self.cfg.patch_embed[1:]
        for i in range(len(self.cfg.depths)):
            sh, sw = px[0] * 2 ** i, px[1] * 2 ** i
            if patch_size % sh or patch_size % sw:
                raise BadConfig(
                    f"patch size {patch_size} is not a multiple of the stage-{i} token size {sh}x{sw}"
                )
            out.append((1 << 30, patch_size // sh, patch_size // sw))
        return out

    def forward(self, x: Tensor, grid_count: int, return_blocks: bool = False):
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ShapeMismatch(f"expected (B, T, H, W, 3) fragments, got {tuple(x.shape)}")
        _, t, h, w, _ = x.shape
        if h != w or h % grid_count:
            raise ShapeMismatch(f"fragment {h}x{w} is not a {grid_count}x{grid_count} grid of square patches")
        tpp = self.tokens_per_patch(h // grid_count)

        x = (x.permute(0, 4, 1, 2, 3) - self.pixel_mean) / self.pixel_std
        pt = self.cfg.patch_embed[0]
        if t % pt:
            x = F.pad(x, (0, 0, 0, 0, 0, pt - t % pt), mode="replicate")
        x = self.embed(x).permute(0, 2, 3, 4, 1)
        x = self.embed_norm(x)

        blocks = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            for block in stage:
                x = block(x, tpp[i])
                blocks.append(x)
        x = self.norm(x)

        b, tt, hh, ww, c = x.shape
        ph, pw = tpp[-1][1:]
        feats = x.view(b, tt, grid_count, ph, grid_count, pw, c).mean(dim=(3, 5))
        return (feats, blocks) if return_blocks else feats


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
