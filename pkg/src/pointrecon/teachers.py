"""Frozen target-feature providers for the contrastive stream.

Teachers are read-only tables (or deterministic oracles) mapping sample ids
or prompt strings to unit feature vectors; nothing here ever carries a
gradient. File-backed tables use the RCEMB1 binary format so embeddings can
be produced out of process.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadClass, BadMagic, DuplicateId, MissingPrompt, Truncated

RCEMB_MAGIC = b"RCEMB1"

# zero-shot prompt grid: prefix + class name + suffix
PROMPT_PREFIXES = (
    "",
    "A ",
    "A model of ",
    "A model of a ",
    "An image of ",
    "An image of a ",
    "A 3D model of ",
    "A 3D model of a ",
    "A rendered model of ",
    "A rendered model of a ",
    "A point cloud of ",
    "A point cloud of a ",
    "A point cloud model of ",
    "A point cloud model of a ",
    "A 3D rendered model of ",
    "A 3D rendered model of a ",
    "A rendered image of ",
    "A rendered image of a ",
    "A 3D rendered image of ",
    "A 3D rendered image of a ",
)
PROMPT_SUFFIXES = ("", ".", " with white background.", " with black context.")


def prompt_grid(class_name: str) -> list[str]:
    """All prefix x suffix prompt strings for one class (20 x 4 = 80)."""
    return [p + class_name + s for p in PROMPT_PREFIXES for s in PROMPT_SUFFIXES]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class TeacherEmbedding:
    """File-backed frozen teacher: sample id (or prompt string) -> vector."""

    modality: str
    dim: int
    table: dict[str, np.ndarray]

    def lookup(self, ids) -> np.ndarray:
        try:
            return np.stack([self.table[i] for i in ids])
        except KeyError as e:
            raise MissingPrompt(f"{self.modality} teacher has no entry for {e.args[0]!r}") from None

    def class_embedding(self, prompts) -> np.ndarray:
        """Mean of the normalized prompt embeddings, re-normalized."""
        vecs = _normalize_rows(self.lookup(prompts).astype(np.float64))
        return _normalize_rows(vecs.mean(axis=0)).astype(np.float32)

    def prompt_embeddings(self, prompts) -> np.ndarray:
        """Normalized per-prompt embeddings (for similarity-mean scoring)."""
        return _normalize_rows(self.lookup(prompts).astype(np.float64)).astype(np.float32)


@dataclass(frozen=True)
class OracleTeacherSpec:
    classes: int
    dim: int
    noise_sigma: float = 0.0
    seed: int = 0


class OracleTeacher:
    """Synthetic frozen teacher: one fixed random unit anchor per class, plus
    optional per-sample Gaussian noise before re-normalization."""

    def __init__(self, spec: OracleTeacherSpec, modality: str = "image"):
        self.spec = spec
        self.modality = modality
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
        self.anchors = _normalize_rows(
            rng.standard_normal((spec.classes, spec.dim))
        ).astype(np.float32)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def vector(self, sample_class: int, sample_seed: int) -> np.ndarray:
        if not 0 <= sample_class < self.spec.classes:
            raise BadClass(f"class {sample_class} outside [0, {self.spec.classes})")
        anchor = self.anchors[sample_class].astype(np.float64)
        if self.spec.noise_sigma == 0.0:
            return anchor.astype(np.float32)
        rng = np.random.default_rng(
            np.random.SeedSequence([self.spec.seed, sample_class, sample_seed])
        )
        noisy = anchor + rng.normal(0.0, self.spec.noise_sigma, size=self.spec.dim)
        return _normalize_rows(noisy).astype(np.float32)

    def class_embedding(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.spec.classes:
            raise BadClass(f"class {class_id} outside [0, {self.spec.classes})")
        return self.anchors[class_id]


def save_embeddings(path, dim: int, records):
    """Write RCEMB1: magic, u32 LE dim, u32 LE count, then per record
    [u16 LE id byte length, UTF-8 id, dim x float32 LE]."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(RCEMB_MAGIC)
        f.write(struct.pack("<II", dim, len(records)))
        for rid, vec in records:
            raw = rid.encode("utf-8")
            arr = np.ascontiguousarray(vec, dtype="<f4")
            if arr.shape != (dim,):
                raise Truncated(f"record {rid!r} has shape {arr.shape}, expected ({dim},)")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(arr.tobytes())


def load_embeddings(path, modality: str = "image") -> TeacherEmbedding:
    """Read RCEMB1 exactly as stored; duplicate ids are rejected."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(RCEMB_MAGIC)] != RCEMB_MAGIC:
        raise BadMagic(f"{path}: not an RCEMB1 file")
    off = len(RCEMB_MAGIC)
    if len(blob) < off + 8:
        raise Truncated(f"{path}: missing dim/count header")
    dim, count = struct.unpack_from("<II", blob, off)
    off += 8
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(blob) < off + 2:
            raise Truncated(f"{path}: record header cut short")
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + id_len + dim * 4:
            raise Truncated(f"{path}: record payload cut short")
        rid = blob[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += dim * 4
        if rid in table:
            raise DuplicateId(f"{path}: id {rid!r} appears twice")
        table[rid] = vec
    if off != len(blob):
        raise Truncated(f"{path}: {len(blob) - off} trailing bytes")
    return TeacherEmbedding(modality, dim, table)


def text_class_embedding(teacher, class_name: str, prompts, class_id: int | None = None) -> np.ndarray:
    """Class text feature: prompt-embedding mean for file-backed teachers,
    the class anchor for oracle teachers (prompts ignored)."""
    if not prompts:
        raise MissingPrompt("prompt set must be nonempty")
    if isinstance(teacher, OracleTeacher):
        if class_id is None:
            raise BadClass(f"oracle teacher needs a class id for {class_name!r}")
        return teacher.class_embedding(class_id)
    return teacher.class_embedding(prompts)
