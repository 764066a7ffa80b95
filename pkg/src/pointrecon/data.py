"""Synthetic paired datasets, manifests, splits, and few-shot episodes.

Each sample is a surface-sampled parametric shape written as an RCPTS1 file,
with its class name doubling as the text description. Everything is
deterministic under the generation seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientSamples, TooManyClasses
from .geometry import PointCloud, normalize_unit_sphere, write_rcpts

SHAPE_FAMILIES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "capsule", "plane")

MANIFEST_NAME = "manifest.json"


@dataclass
class EpisodeSpec:
    ways: int
    shots: int
    query_per_class: int
    runs: int = 10
    seed: int = 0


@dataclass
class DatasetManifest:
    samples: list[dict]            # {id, class_name, class_id, pointcloud_path, image_emb_id, text}
    classes: list[str]
    split: dict[str, list[str]]    # {"train": ids, "test": ids}
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [s["id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InsufficientSamples("sample ids must be unique")

    def by_id(self, sample_id: str) -> dict:
        if not hasattr(self, "_index"):
            self._index = {s["id"]: s for s in self.samples}
        return self._index[sample_id]

    def ids(self, split: str) -> list[str]:
        return list(self.split[split])

    def class_ids_of(self, ids) -> np.ndarray:
        return np.array([self.by_id(i)["class_id"] for i in ids], dtype=np.int64)

    def cloud_path(self, sample_id: str) -> Path:
        return self.root / self.by_id(sample_id)["pointcloud_path"]

    def to_json(self) -> str:
        payload = {"samples": self.samples, "classes": self.classes, "split": self.split}
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        return cls(payload["samples"], payload["classes"], payload["split"], root=path.parent)


def _sample_sphere(rng, n):
    r = rng.uniform(0.5, 1.0)
    v = rng.standard_normal((n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube(rng, n):
    half = rng.uniform(0.7, 1.0, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)  # +/- face per axis
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for sign_i, sign in enumerate((1.0, -1.0)):
            sel = face == 2 * axis + sign_i
            pts[sel, axis] = sign * half[axis]
            pts[np.ix_(sel, others)] = uv[sel] * half[others]
    return pts


def _sample_cylinder(rng, n):
    r = rng.uniform(0.3, 0.5)
    h = rng.uniform(1.6, 2.4)
    lateral = 2 * np.pi * r * h
    caps = 2 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    y = rng.uniform(-h / 2, h / 2, size=n)
    rho = r * np.sqrt(rng.uniform(size=n))
    cap_sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts[:, 0] = np.where(on_side, r, rho) * np.cos(theta)
    pts[:, 2] = np.where(on_side, r, rho) * np.sin(theta)
    pts[:, 1] = np.where(on_side, y, cap_sign * h / 2)
    return pts


def _sample_cone(rng, n):
    r = rng.uniform(0.5, 0.8)
    h = rng.uniform(1.2, 1.8)
    slant = np.hypot(r, h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    s = np.sqrt(rng.uniform(size=n))  # area-uniform fraction from the apex
    rho = np.where(on_side, r * s, r * np.sqrt(rng.uniform(size=n)))
    y = np.where(on_side, h * (1 - s), 0.0)
    return np.stack([rho * np.cos(theta), y, rho * np.sin(theta)], axis=1)


def _sample_torus(rng, n):
    big = rng.uniform(0.6, 1.0)
    small = rng.uniform(0.15, 0.35) * big
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:  # rejection keeps the surface density uniform
        m = 2 * (n - filled) + 16
        theta = rng.uniform(0, 2 * np.pi, size=m)
        phi = rng.uniform(0, 2 * np.pi, size=m)
        accept = rng.uniform(size=m) < (big + small * np.cos(phi)) / (big + small)
        theta, phi = theta[accept], phi[accept]
        take = min(len(theta), n - filled)
        radial = big + small * np.cos(phi[:take])
        pts[filled : filled + take, 0] = radial * np.cos(theta[:take])
        pts[filled : filled + take, 2] = radial * np.sin(theta[:take])
        pts[filled : filled + take, 1] = small * np.sin(phi[:take])
        filled += take
    return pts


def _triangle_points(rng, verts, n):
    u = rng.uniform(size=(n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    a, b, c = verts
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def _sample_pyramid(rng, n):
    half = rng.uniform(0.6, 0.9)
    h = rng.uniform(1.0, 1.5)
    apex = np.array([0.0, h, 0.0])
    corners = np.array([
        [half, 0, half], [half, 0, -half], [-half, 0, -half], [-half, 0, half],
    ])
    side = np.hypot(half, h)  # apex-to-edge-midpoint distance
    tri_area = half * side
    base_area = (2 * half) ** 2
    areas = np.array([tri_area] * 4 + [base_area])
    which = rng.choice(5, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for i in range(4):
        sel = which == i
        pts[sel] = _triangle_points(rng, (apex, corners[i], corners[(i + 1) % 4]), sel.sum())
    sel = which == 4
    uv = rng.uniform(-half, half, size=(sel.sum(), 2))
    pts[sel] = np.stack([uv[:, 0], np.zeros(sel.sum()), uv[:, 1]], axis=1)
    return pts


def _sample_capsule(rng, n):
    r = rng.uniform(0.25, 0.4)
    h = rng.uniform(1.2, 1.8)
    lateral = 2 * np.pi * r * h
    spheres = 4 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + spheres)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    # cylinder wall
    y = rng.uniform(-h / 2, h / 2, size=n)
    pts[:, 0] = r * np.cos(theta)
    pts[:, 2] = r * np.sin(theta)
    pts[:, 1] = y
    # hemispherical ends
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    cap = v * r
    cap[:, 1] = np.abs(cap[:, 1]) * np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    cap[:, 1] += np.sign(cap[:, 1]) * h / 2
    pts[~on_side] = cap[~on_side]
    return pts


def _sample_plane(rng, n):
    a = rng.uniform(0.6, 1.2)
    b = rng.uniform(0.3, 1.0)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.stack([uv[:, 0] * a, np.zeros(n), uv[:, 1] * b], axis=1)


_GENERATORS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "pyramid": _sample_pyramid,
    "capsule": _sample_capsule,
    "plane": _sample_plane,
}


def sample_shape(kind: str, n: int, rng) -> np.ndarray:
    """Raw (un-normalized) surface samples of one randomized shape instance."""
    return _GENERATORS[kind](rng, n)


def gen_synthetic(classes: int, per_class: int, points_per_cloud: int, seed: int,
                  out_dir) -> DatasetManifest:
    """Generate a labeled shape dataset with an 80/20 stratified split."""
    if classes > len(SHAPE_FAMILIES):
        raise TooManyClasses(f"at most {len(SHAPE_FAMILIES)} shape families, asked for {classes}")
    if per_class < 2:
        raise InsufficientSamples("need per_class >= 2 for a stratified split")
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    class_names = list(SHAPE_FAMILIES[:classes])
    samples = []
    split = {"train": [], "test": []}
    n_train = int(round(0.8 * per_class))
    for class_id, name in enumerate(class_names):
        for j in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, class_id, j]))
            pts = sample_shape(name, points_per_cloud, rng)
            sid = f"{name}_{j:04d}"
            pc = normalize_unit_sphere(PointCloud(pts.astype(np.float32), sid))
            rel = f"clouds/{sid}.rcpts"
            write_rcpts(out_dir / rel, pc)
            samples.append({
                "id": sid,
                "class_name": name,
                "class_id": class_id,
                "pointcloud_path": rel,
                "image_emb_id": sid,
                "text": name,
            })
        order = np.random.default_rng(
            np.random.SeedSequence([seed, class_id, 1 << 20])
        ).permutation(per_class)
        ids = [f"{name}_{j:04d}" for j in order]
        split["train"].extend(sorted(ids[:n_train]))
        split["test"].extend(sorted(ids[n_train:]))
    manifest = DatasetManifest(samples, class_names, split, root=out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def shuffle_image_pairing(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Unpaired-data ablation: permute image embedding ids within each class."""
    samples = [dict(s) for s in manifest.samples]
    for class_id in range(len(manifest.classes)):
        idx = [i for i, s in enumerate(samples) if s["class_id"] == class_id]
        rng = np.random.default_rng(np.random.SeedSequence([seed, class_id]))
        perm = rng.permutation(len(idx))
        originals = [samples[i]["image_emb_id"] for i in idx]
        for i, p in zip(idx, perm):
            samples[i]["image_emb_id"] = originals[p]
    return DatasetManifest(samples, list(manifest.classes),
                           {k: list(v) for k, v in manifest.split.items()},
                           root=manifest.root)


def sample_episode(manifest: DatasetManifest, spec: EpisodeSpec, run_index: int):
    """Draw one few-shot episode: per chosen class, disjoint support and
    query ids from the train split. Deterministic per (seed, run_index)."""
    if spec.ways > len(manifest.classes):
        raise InsufficientSamples(f"{spec.ways}-way episode over {len(manifest.classes)} classes")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, run_index]))
    class_ids = rng.choice(len(manifest.classes), size=spec.ways, replace=False)
    train_ids = manifest.ids("train")
    support, query = [], []
    for cid in class_ids:
        pool = [i for i in train_ids if manifest.by_id(i)["class_id"] == cid]
        need = spec.shots + spec.query_per_class
        if len(pool) < need:
            raise InsufficientSamples(
                f"class {manifest.classes[cid]} has {len(pool)} train samples, episode needs {need}"
            )
        picked = rng.permutation(len(pool))[:need]
        support.extend(pool[k] for k in picked[: spec.shots])
        query.extend(pool[k] for k in picked[spec.shots :])
    return support, query
