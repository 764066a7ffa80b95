"""Frozen feature encoders.

Two families:

* "rp-<dim>" -- a deterministic offline encoder: a fixed seeded random
  projection over a depth-silhouette raster (images) or hashed byte
  3-grams (text). No downloads, byte-stable across runs, unit-normalized
  float32 output. The stand-in of record when no pretrained checkpoint is
  reachable.
* hub names (anything else) -- resolved through `transformers`; raises
  EncoderUnavailable when the library or its weights cannot be loaded.
"""

from __future__ import annotations

import re
import zlib

import numpy as np


class EncoderUnavailable(Exception):
    pass


class MissingAsset(Exception):
    pass


RASTER = 32          # silhouette raster is 3 views of RASTER x RASTER
TEXT_BINS = 4096

_RP_NAME = re.compile(r"^rp-(\d+)$")


def _projection(seed_key: str, in_dim: int, out_dim: int) -> np.ndarray:
    seed = zlib.crc32(seed_key.encode())
    rng = np.random.default_rng(np.random.SeedSequence([seed, in_dim, out_dim]))
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def silhouette_raster(points: np.ndarray, res: int = RASTER) -> np.ndarray:
    """Depth-silhouette descriptor: three orthographic views, each cell
    keeping the nearest-to-viewer depth, flattened to 3 * res * res."""
    pts = np.asarray(points, dtype=np.float64)
    views = []
    for axes, depth_axis in (((0, 1), 2), ((0, 2), 1), ((1, 2), 0)):
        img = np.full((res, res), -1.0)
        uv = np.clip(((pts[:, axes] + 1.0) / 2.0 * res).astype(np.int64), 0, res - 1)
        depth = pts[:, depth_axis]
        for (u, v), d in zip(uv, depth):
            if d > img[u, v]:
                img[u, v] = d
        views.append(img.reshape(-1))
    return np.concatenate(views)


def text_ngram_counts(text: str, bins: int = TEXT_BINS) -> np.ndarray:
    raw = text.encode("utf-8")
    counts = np.zeros(bins)
    padded = b"\x02" + raw + b"\x03"
    for i in range(len(padded) - 2):
        counts[zlib.crc32(padded[i : i + 3]) % bins] += 1.0
    norm = np.linalg.norm(counts)
    return counts / norm if norm > 0 else counts


class RandomProjectionEncoder:
    """Deterministic offline encoder family ("rp-<dim>")."""

    def __init__(self, dim: int):
        self.dim = dim
        self._img_proj = _projection("rp-image", 3 * RASTER * RASTER, dim)
        self._txt_proj = _projection("rp-text", TEXT_BINS, dim)

    def encode_image(self, points: np.ndarray) -> np.ndarray:
        feat = silhouette_raster(points) @ self._img_proj
        return (feat / np.linalg.norm(feat)).astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        feat = text_ngram_counts(text) @ self._txt_proj
        return (feat / np.linalg.norm(feat)).astype(np.float32)


class HubEncoder:
    """Pretrained encoder resolved via transformers; weights must already be
    obtainable (local cache or reachable hub)."""

    def __init__(self, name: str, modality: str):
        try:
            import transformers
        except ImportError as e:
            raise EncoderUnavailable(f"transformers not installed for {name!r}: {e}") from None
        try:
            if modality == "text":
                self.tokenizer = transformers.AutoTokenizer.from_pretrained(name)
                self.model = transformers.AutoModel.from_pretrained(name)
            else:
                self.processor = transformers.AutoImageProcessor.from_pretrained(name)
                self.model = transformers.AutoModel.from_pretrained(name)
        except Exception as e:
            raise EncoderUnavailable(f"cannot load pretrained encoder {name!r}: {e}") from None
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)
        self.modality = modality

    def encode_text(self, text: str) -> np.ndarray:
        import torch
        with torch.no_grad():
            tokens = self.tokenizer(text, return_tensors="pt")
            out = self.model(**tokens).last_hidden_state.mean(dim=1)[0].numpy()
        return (out / np.linalg.norm(out)).astype(np.float32)

    def encode_image(self, points: np.ndarray) -> np.ndarray:
        import torch
        img = silhouette_raster(points).reshape(3, RASTER, RASTER)
        img = (img + 1.0) / 2.0
        with torch.no_grad():
            inputs = self.processor(images=img, return_tensors="pt", do_rescale=False)
            out = self.model(**inputs).last_hidden_state.mean(dim=1)[0].numpy()
        return (out / np.linalg.norm(out)).astype(np.float32)


def resolve_encoder(name: str, modality: str):
    m = _RP_NAME.match(name)
    if m:
        return RandomProjectionEncoder(int(m.group(1)))
    return HubEncoder(name, modality)
