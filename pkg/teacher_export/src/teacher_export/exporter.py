"""Export frozen teacher features for a dataset manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .encoders import MissingAsset, resolve_encoder
from .formats import read_rcpts, write_rcemb

# zero-shot prompt grid: prefix + class name + suffix, mirrored from the
# training artifact's prompt table
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


@dataclass
class ExportJob:
    manifest_path: Path
    modality: str                  # image | text
    encoder: str
    out_path: Path
    prompt_mode: str = "grid"      # grid | plain
    batch_size: int = 16


def prompt_strings(class_name: str, mode: str) -> list[str]:
    if mode == "plain":
        return [class_name]
    return [p + class_name + s for p in PROMPT_PREFIXES for s in PROMPT_SUFFIXES]


def export_embeddings(job: ExportJob) -> dict:
    """Write one RCEMB1 file: a record per sample id (image) or per prompt
    string (text), vectors l2-normalized float32, manifest order."""
    manifest = json.loads(Path(job.manifest_path).read_text())
    root = Path(job.manifest_path).parent
    encoder = resolve_encoder(job.encoder, job.modality)
    records = []
    if job.modality == "text":
        for class_name in manifest["classes"]:
            for prompt in prompt_strings(class_name, job.prompt_mode):
                records.append((prompt, encoder.encode_text(prompt)))
    elif job.modality == "image":
        for sample in manifest["samples"]:
            cloud = root / sample["pointcloud_path"]
            if not cloud.exists():
                raise MissingAsset(f"no point cloud for sample {sample['id']!r}: {cloud}")
            # renders are not reproducible offline; a depth-silhouette
            # projection of the point cloud substitutes for the image
            records.append((sample["id"], encoder.encode_image(read_rcpts(cloud))))
    else:
        raise ValueError(f"unknown modality {job.modality!r}")
    write_rcemb(job.out_path, encoder.dim, records)
    return {"records": len(records), "dim": encoder.dim, "out": str(job.out_path),
            "fallback_silhouette": job.modality == "image"}
