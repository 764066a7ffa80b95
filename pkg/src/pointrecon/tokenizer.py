"""Patchify point clouds into masked token sequences.

A cloud becomes G patches (farthest-point-sampled centers, k-NN groups in
center-relative coordinates), each embedded by a mini point encoder and
tagged with a positional embedding of its center. A MaskSpec partitions the
G tokens into visible and masked sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import BadRatio
from .geometry import PointCloud, fps, knn_group


@dataclass(frozen=True)
class PatchSet:
    centers: np.ndarray  # (G, 3) float32
    groups: np.ndarray   # (G, S, 3) float32, center-relative
    source_id: str = ""

    @property
    def g(self) -> int:
        return self.centers.shape[0]

    @property
    def s(self) -> int:
        return self.groups.shape[1]


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    visible_idx: np.ndarray  # int64, ascending
    masked_idx: np.ndarray   # int64, ascending
    seed: int


@dataclass
class TokenBatch:
    embeddings: torch.Tensor   # (B, G, C)
    pos: torch.Tensor          # (B, G, C)
    masks: list[MaskSpec]
    patch_sets: list[PatchSet]

    def mask_bool(self) -> torch.Tensor:
        """(B, G) bool, True where the token is masked."""
        g = self.embeddings.shape[1]
        rows = []
        for spec in self.masks:
            row = torch.zeros(g, dtype=torch.bool)
            row[torch.from_numpy(spec.masked_idx)] = True
            rows.append(row)
        return torch.stack(rows)


def patchify(pc: PointCloud, g: int, s: int, seed: int) -> PatchSet:
    """FPS centers + k-NN groups, groups re-expressed relative to centers."""
    center_idx = fps(pc, g, seed)
    _, rel = knn_group(pc, center_idx, s)
    return PatchSet(pc.points[center_idx].copy(), rel, pc.id)


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_select(g: int, ratio: float, seed: int, block: bool = False,
                centers: np.ndarray | None = None) -> MaskSpec:
    """Random visible/masked partition of g tokens.

    round-half-away-from-zero(ratio * g) tokens are masked. The default is a
    uniform random subset; block=True masks the nearest-center neighborhood
    of a random seed token instead (requires centers).
    """
    if not 0 <= ratio < 1:
        raise BadRatio(f"mask ratio must lie in [0, 1), got {ratio}")
    n_mask = round_half_away(ratio * g)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if n_mask == 0:
        masked = np.empty(0, dtype=np.int64)
    elif block:
        if centers is None:
            raise BadRatio("block masking needs patch centers")
        anchor = int(rng.integers(g))
        d2 = ((centers - centers[anchor]) ** 2).sum(axis=1)
        masked = np.sort(np.argsort(d2, kind="stable")[:n_mask]).astype(np.int64)
    else:
        masked = np.sort(rng.permutation(g)[:n_mask]).astype(np.int64)
    visible = np.setdiff1d(np.arange(g, dtype=np.int64), masked, assume_unique=True)
    return MaskSpec(ratio, visible, masked, seed)


class PatchEmbed(nn.Module):
    """Mini point encoder: shared pointwise MLP, max-pool, pooled-concat MLP.

    Permutation-invariant within each group because both reductions are
    channel-wise maxima. Stage widths are configurable; the defaults match
    the usual 3-128-256 / 512-512-C lineage shape.
    """

    def __init__(self, out_dim: int, stage1: int = 128, stage2: int = 256):
        super().__init__()
        self.first = nn.Sequential(
            nn.Linear(3, stage1),
            nn.ReLU(),
            nn.Linear(stage1, stage2),
        )
        self.second = nn.Sequential(
            nn.Linear(2 * stage2, 2 * stage2),
            nn.ReLU(),
            nn.Linear(2 * stage2, out_dim),
        )
        self.out_dim = out_dim

    def forward(self, groups: torch.Tensor) -> torch.Tensor:
        """groups: (..., S, 3) -> (..., C)"""
        feat = self.first(groups)                                   # (..., S, F)
        pooled = feat.max(dim=-2, keepdim=True).values              # (..., 1, F)
        feat = torch.cat([pooled.expand_as(feat), feat], dim=-1)    # (..., S, 2F)
        feat = self.second(feat)                                    # (..., S, C)
        return feat.max(dim=-2).values


class PosEmbed(nn.Module):
    """Two-layer MLP on patch center coordinates."""

    def __init__(self, out_dim: int, hidden: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3, hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        """centers: (..., 3) -> (..., C)"""
        return self.mlp(centers)


def build_token_batch(patch_sets: list[PatchSet], patch_embed: PatchEmbed,
                      pos_embed: PosEmbed, ratio: float, seed: int,
                      block: bool = False) -> TokenBatch:
    """Stack patch sets into a batch, embed, and draw per-sample masks."""
    dtype = next(patch_embed.parameters()).dtype
    groups = torch.stack([torch.from_numpy(ps.groups) for ps in patch_sets]).to(dtype)
    centers = torch.stack([torch.from_numpy(ps.centers) for ps in patch_sets]).to(dtype)
    emb = patch_embed(groups)
    pos = pos_embed(centers)
    masks = [
        mask_select(ps.g, ratio, seed + i, block=block, centers=ps.centers)
        for i, ps in enumerate(patch_sets)
    ]
    return TokenBatch(emb, pos, masks, patch_sets)
