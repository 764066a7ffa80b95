"""Deterministic point-cloud geometry kernels and augmentations.

All functions are pure: given the same inputs (and seed where one is taken)
they return bit-identical results on the same platform. Arrays are float32
(x, y, z) rows unless stated otherwise; the up axis is y.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .errors import BadCount, BadSpec, EmptySet, NonFinite, BadMagic, Truncated

RCPTS_MAGIC = b"RCPTS1"

AUGMENT_KINDS = ("none", "rotation", "scale_translate", "jitter", "dropout", "horizontal_flip")


@dataclass(frozen=True)
class PointCloud:
    """A finite set of 3D coordinates for one object instance."""

    points: np.ndarray  # (N, 3) float32
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise BadSpec(f"points must be (N, 3) with N >= 1, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class AugmentSpec:
    """Parameters for one augmentation draw.

    kind-specific params:
      rotation        -- none (angle drawn U[0, 2pi) about the up axis)
      scale_translate -- scale_low, scale_high, translate (per-axis U draws)
      jitter          -- sigma, clip
      dropout         -- ratio
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise BadSpec(f"unknown augmentation kind {self.kind!r}")
        p = self.params
        if self.kind == "jitter":
            if p.get("sigma", 0.01) <= 0:
                raise BadSpec("jitter sigma must be > 0")
            if p.get("clip", 0.05) < p.get("sigma", 0.01):
                raise BadSpec("jitter clip must be >= sigma")
        elif self.kind == "scale_translate":
            if p.get("scale_low", 0.66) >= p.get("scale_high", 1.5):
                raise BadSpec("scale range must satisfy low < high")
        elif self.kind == "dropout":
            r = p.get("ratio", 0.2)
            if not 0 <= r < 1:
                raise BadSpec("dropout ratio must lie in [0, 1)")


def _require_finite(points: np.ndarray):
    if not np.isfinite(points).all():
        raise NonFinite("point coordinates must be finite")


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to norm 1.

    A cloud whose points all coincide collapses to the origin (radius 0).
    """
    _require_finite(pc.points)
    centered = pc.points.astype(np.float64) - pc.points.astype(np.float64).mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered /= radius
    return PointCloud(centered.astype(np.float32), pc.id)


def fps(pc: PointCloud, m: int, seed: int) -> np.ndarray:
    """Farthest point sampling: m point indices, greedy max-min.

    The first index is drawn uniformly from the seed; every later pick is the
    point with the largest distance to the already-selected set (lowest index
    on ties). Returns int64 indices, pairwise distinct.
    """
    pts = pc.points.astype(np.float64)
    n = pts.shape[0]
    if m < 1 or m > n:
        raise BadCount(f"need 1 <= m <= N, got m={m}, N={n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for t in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[t] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


class KnnGroups(NamedTuple):
    idx: np.ndarray  # (G, k) int64, neighbor indices per center
    rel: np.ndarray  # (G, k, 3) float32, neighbor - center


def knn_group(pc: PointCloud, centers: np.ndarray, k: int) -> KnnGroups:
    """k nearest points per center (center included), ties by ascending index.

    Group coordinates come back re-expressed relative to their center.
    """
    pts = pc.points.astype(np.float64)
    n = pts.shape[0]
    if k < 1 or k > n:
        raise BadCount(f"need 1 <= k <= N, got k={k}, N={n}")
    centers = np.asarray(centers, dtype=np.int64)
    center_pts = pts[centers]  # (G, 3)
    d2 = ((center_pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)  # (G, N)
    # stable sort keeps ascending point index among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]  # (G, k)
    rel = pts[order] - center_pts[:, None, :]
    return KnnGroups(order.astype(np.int64), rel.astype(np.float32))


def chamfer_l2(a, b) -> torch.Tensor:
    """Symmetric squared-nearest-neighbor distance between two point sets.

    (1/|a|) sum_r min_g ||r-g||^2 + (1/|b|) sum_g min_r ||r-g||^2, both terms
    normalized. Accepts (N, 3) tensors or arrays; differentiable through
    torch inputs; returns a 0-dim tensor in the promoted input dtype.
    """
    ta = torch.as_tensor(a)
    tb = torch.as_tensor(b)
    if ta.numel() == 0 or tb.numel() == 0:
        raise EmptySet("chamfer distance needs two nonempty sets")
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[1]:
        raise BadSpec(f"expected (N, d) sets with equal d, got {tuple(ta.shape)} vs {tuple(tb.shape)}")
    d2 = ((ta[:, None, :] - tb[None, :, :]) ** 2).sum(dim=2)  # (|a|, |b|)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def _rotation_up(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=np.float64)


def augment(pc: PointCloud, spec: AugmentSpec) -> PointCloud:
    """Apply one augmentation draw; deterministic under spec.seed."""
    _require_finite(pc.points)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    pts = pc.points.astype(np.float64)
    p = spec.params
    if spec.kind == "none":
        out = pts
    elif spec.kind == "rotation":
        angle = rng.uniform(0.0, 2.0 * np.pi)
        out = pts @ _rotation_up(angle).T
    elif spec.kind == "scale_translate":
        lo = p.get("scale_low", 0.66)
        hi = p.get("scale_high", 1.5)
        t = p.get("translate", 0.2)
        scale = rng.uniform(lo, hi, size=3)
        shift = rng.uniform(-t, t, size=3)
        out = pts * scale + shift
    elif spec.kind == "jitter":
        sigma = p.get("sigma", 0.01)
        clip = p.get("clip", 0.05)
        noise = np.clip(rng.normal(0.0, sigma, size=pts.shape), -clip, clip)
        out = pts + noise
    elif spec.kind == "dropout":
        ratio = p.get("ratio", 0.2)
        keep = max(1, int(round(pts.shape[0] * (1.0 - ratio))))
        kept = np.sort(rng.permutation(pts.shape[0])[:keep])
        out = pts[kept]
    elif spec.kind == "horizontal_flip":
        out = pts * np.array([-1.0, 1.0, 1.0])
    else:  # pragma: no cover - AugmentSpec already validates
        raise BadSpec(spec.kind)
    return PointCloud(out.astype(np.float32), pc.id)


def write_rcpts(path, pc: PointCloud):
    """Write the RCPTS1 binary format: magic, u32 LE count, Nx3 float32 LE."""
    pts = np.ascontiguousarray(pc.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RCPTS_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


def read_rcpts(path, id: str = "") -> PointCloud:
    """Read an RCPTS1 file, rejecting wrong magic or truncated payloads."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(RCPTS_MAGIC)] != RCPTS_MAGIC:
        raise BadMagic(f"{path}: not an RCPTS1 file")
    if len(blob) < len(RCPTS_MAGIC) + 4:
        raise Truncated(f"{path}: missing point count")
    (n,) = struct.unpack_from("<I", blob, len(RCPTS_MAGIC))
    payload = blob[len(RCPTS_MAGIC) + 4 :]
    if len(payload) != n * 12:
        raise Truncated(f"{path}: expected {n * 12} payload bytes, got {len(payload)}")
    pts = np.frombuffer(payload, dtype="<f4").reshape(n, 3).copy()
    return PointCloud(pts, id)
