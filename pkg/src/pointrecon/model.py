"""Two-stream point transformer.

A 12-layer encoder performs masked point modeling; a 12-layer query decoder
reads each encoder layer through cross-attention (detached by default so the
contrastive objective cannot steer the reconstruction stream) and produces
global features from learnable query tokens. A shallow reconstruction decoder
with a shared mask token predicts the masked patches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import BadConfig, BadMagic, MissingTaps, NotNormalized, ShapeMismatch, Truncated
from .tokenizer import PatchEmbed, PosEmbed, TokenBatch

VARIANTS = {
    "Tiny": dict(hidden=192, mlp=768, heads=3),
    "Small": dict(hidden=256, mlp=1024, heads=4),
    "Base": dict(hidden=384, mlp=1536, heads=6),
}

CKPT_MANIFEST = "manifest.json"
CKPT_BLOB = "params.bin"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    hidden: int = 384
    mlp: int = 1536
    heads: int = 6
    num_patches: int = 64
    patch_size: int = 32
    mask_ratio: float = 0.6
    rec_decoder_depth: int = 4
    drop_path: float = 0.1
    queries: tuple[str, ...] = ("IMG", "TXT")
    img_dim: int = 768
    txt_dim: int = 512
    self_dim: int = 256
    query_self_attn: bool = False
    embed_stage1: int = 128
    embed_stage2: int = 256

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise BadConfig(f"hidden {self.hidden} not divisible by heads {self.heads}")
        for q in self.queries:
            if q not in ("IMG", "TXT", "SELF", "CLS"):
                raise BadConfig(f"unknown query token {q!r}")

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        if name not in VARIANTS:
            raise BadConfig(f"unknown variant {name!r}; pick one of {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[name], **overrides})

    def proj_dim(self, query: str) -> int:
        return {"IMG": self.img_dim, "TXT": self.txt_dim}.get(query, self.self_dim)


@dataclass
class ForwardOutput:
    reconstructed_patches: torch.Tensor | None      # (B, M, S, 3) or None
    global_features: dict[str, torch.Tensor]        # query name -> (B, D) projected
    query_features: dict[str, torch.Tensor]         # query name -> (B, C) pre-projection
    encoder_layer_outputs: list[torch.Tensor]       # L x (B, V, C) post-block
    encoder_final: torch.Tensor                     # (B, V, C) after final norm
    attention_maps: list[torch.Tensor] | None       # L x (B, H, V, V)


class DropPath(nn.Module):
    """Per-sample stochastic depth on residual branches."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, capture: bool = False):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)                        # (B, H, N, N)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), (attn if capture else None)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, queries, memory):
        b, q, c = queries.shape
        n = memory.shape[1]
        h = self.heads
        qh = self.wq(queries).reshape(b, q, h, c // h).transpose(1, 2)
        kh = self.wk(memory).reshape(b, n, h, c // h).transpose(1, 2)
        vh = self.wv(memory).reshape(b, n, h, c // h).transpose(1, 2)
        attn = ((qh @ kh.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, q, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp: int, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, capture: bool = False):
        attn_out, attn_map = self.attn(self.norm1(x), capture)
        x = x + self.drop_path(attn_out)
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x, attn_map


class DecoderBlock(nn.Module):
    """Query block: cross-attention over encoder memory, then FFN.

    Query self-attention is off by default; enabling it adds the classic
    encoder-decoder sublayer order at the cost of parameter-count fidelity.
    """

    def __init__(self, dim: int, heads: int, mlp: int, drop_path: float = 0.0,
                 self_attn: bool = False):
        super().__init__()
        if self_attn:
            self.norm_sa = nn.LayerNorm(dim)
            self.self_attn = Attention(dim, heads)
        else:
            self.self_attn = None
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp)
        self.drop_path = DropPath(drop_path)

    def forward(self, q, memory):
        if self.self_attn is not None:
            sa_out, _ = self.self_attn(self.norm_sa(q))
            q = q + self.drop_path(sa_out)
        q = q + self.drop_path(self.cross_attn(self.norm_q(q), self.norm_kv(memory)))
        q = q + self.drop_path(self.mlp(self.norm2(q)))
        return q


def _drop_path_rates(rate: float, depth: int) -> list[float]:
    if depth == 1:
        return [rate]
    return [rate * i / (depth - 1) for i in range(depth)]


class ReConModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden
        self.patch_embed = PatchEmbed(c, cfg.embed_stage1, cfg.embed_stage2)
        self.pos_embed = PosEmbed(c)
        rates = _drop_path_rates(cfg.drop_path, cfg.layers)
        self.encoder_blocks = nn.ModuleList(
            EncoderBlock(c, cfg.heads, cfg.mlp, r) for r in rates
        )
        self.encoder_norm = nn.LayerNorm(c)
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(c, cfg.heads, cfg.mlp, r, cfg.query_self_attn) for r in rates
        )
        self.decoder_norm = nn.LayerNorm(c)
        self.queries = nn.ParameterDict(
            {name: nn.Parameter(torch.zeros(1, 1, c)) for name in cfg.queries}
        )
        self.projections = nn.ModuleDict(
            {name: nn.Linear(c, cfg.proj_dim(name)) for name in cfg.queries if name != "CLS"}
        )
        # pretraining-only: reconstruction stream
        self.rec_pos_embed = PosEmbed(c)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, c))
        rec_rates = _drop_path_rates(cfg.drop_path, cfg.rec_decoder_depth)
        self.rec_blocks = nn.ModuleList(
            EncoderBlock(c, cfg.heads, cfg.mlp, r) for r in rec_rates
        )
        self.rec_norm = nn.LayerNorm(c)
        self.rec_head = nn.Linear(c, cfg.patch_size * 3)

    PRETRAIN_ONLY_PREFIXES = ("rec_pos_embed", "mask_token", "rec_blocks", "rec_norm", "rec_head")

    def encoder_forward(self, x: torch.Tensor, capture: bool = False):
        """x: (B, V, C) tokens with positions already added.

        Returns every block's output (the cross-attention taps) and, when
        capture is set, each layer's attention probabilities.
        """
        if x.shape[-1] != self.cfg.hidden:
            raise ShapeMismatch(f"token width {x.shape[-1]} != hidden {self.cfg.hidden}")
        outs, maps = [], []
        for block in self.encoder_blocks:
            x, attn = block(x, capture)
            outs.append(x)
            if capture:
                maps.append(attn)
        return outs, (maps if capture else None)

    def global_decoder_forward(self, encoder_layer_outputs, stop_grad: bool = True):
        """Run the query decoder over per-layer encoder taps.

        With stop_grad on, every cross-attention reads a detached tap, so no
        contrastive gradient can reach the encoder stream.
        """
        if len(encoder_layer_outputs) != len(self.decoder_blocks):
            raise MissingTaps(
                f"need {len(self.decoder_blocks)} encoder layer outputs, "
                f"got {len(encoder_layer_outputs)}"
            )
        b = encoder_layer_outputs[0].shape[0]
        names = list(self.queries.keys())
        q = torch.cat([self.queries[n].expand(b, 1, -1) for n in names], dim=1)
        for block, tap in zip(self.decoder_blocks, encoder_layer_outputs):
            memory = tap.detach() if stop_grad else tap
            q = block(q, memory)
        q = self.decoder_norm(q)
        query_features = {n: q[:, i] for i, n in enumerate(names)}
        global_features = {
            n: self.projections[n](query_features[n]) for n in names if n in self.projections
        }
        return global_features, query_features

    def rec_decoder_forward(self, encoded_visible, mask_bool, pos_all):
        """Fill masked slots with the shared mask token and predict patches.

        encoded_visible: (B, V, C); mask_bool: (B, G); pos_all: (B, G, C).
        Returns (B, M, S, 3) relative coordinates, M = masked tokens per
        sample (equal across the batch), or None when nothing is masked.
        """
        b, g = mask_bool.shape
        n_masked = int(mask_bool[0].sum())
        if (mask_bool.sum(dim=1) != n_masked).any():
            raise ShapeMismatch("per-sample mask counts differ within the batch")
        if encoded_visible.shape[1] != g - n_masked:
            raise ShapeMismatch(
                f"visible token count {encoded_visible.shape[1]} != {g - n_masked}"
            )
        if n_masked == 0:
            return None
        c = self.cfg.hidden
        pos_vis = pos_all[~mask_bool].view(b, g - n_masked, c)
        pos_mask = pos_all[mask_bool].view(b, n_masked, c)
        x = torch.cat([encoded_visible, self.mask_token.expand(b, n_masked, c)], dim=1)
        x = x + torch.cat([pos_vis, pos_mask], dim=1)
        for block in self.rec_blocks:
            x, _ = block(x)
        x = self.rec_norm(x[:, -n_masked:])
        return self.rec_head(x).reshape(b, n_masked, self.cfg.patch_size, 3)


    def forward(self, batch: TokenBatch, stop_grad: bool = True,
                capture_attention: bool = False) -> ForwardOutput:
        mask = batch.mask_bool()
        b, g, c = batch.embeddings.shape
        n_vis = g - int(mask[0].sum())
        x_vis = batch.embeddings[~mask].view(b, n_vis, c)
        pos_vis = batch.pos[~mask].view(b, n_vis, c)
        layer_outs, attn_maps = self.encoder_forward(x_vis + pos_vis, capture_attention)
        enc_final = self.encoder_norm(layer_outs[-1])
        centers = torch.stack(
            [torch.from_numpy(ps.centers) for ps in batch.patch_sets]
        ).to(batch.embeddings.dtype)
        rec = self.rec_decoder_forward(enc_final, mask, self.rec_pos_embed(centers))
        global_features, query_features = self.global_decoder_forward(layer_outs, stop_grad)
        return ForwardOutput(rec, global_features, query_features, layer_outs,
                             enc_final, attn_maps)


class PlainEncoderModel(nn.Module):
    """Single-stream baseline: one transformer over patch tokens.

    Covers the generative-only path (with_rec), the contrastive-only path
    (pooled features projected per modality), and the shared multi-task
    setup (global query tokens appended to the token sequence).
    """

    def __init__(self, cfg: ModelConfig, with_rec: bool, with_queries: bool,
                 con_dims: dict[str, int] | None = None):
        super().__init__()
        self.cfg = cfg
        self.with_rec = with_rec
        self.with_queries = with_queries
        c = cfg.hidden
        self.patch_embed = PatchEmbed(c, cfg.embed_stage1, cfg.embed_stage2)
        self.pos_embed = PosEmbed(c)
        rates = _drop_path_rates(cfg.drop_path, cfg.layers)
        self.blocks = nn.ModuleList(EncoderBlock(c, cfg.heads, cfg.mlp, r) for r in rates)
        self.norm = nn.LayerNorm(c)
        con_dims = con_dims or {}
        if with_queries:
            self.queries = nn.ParameterDict(
                {name: nn.Parameter(torch.zeros(1, 1, c)) for name in con_dims}
            )
            self.projections = nn.ModuleDict(
                {name: nn.Linear(c, d) for name, d in con_dims.items()}
            )
        else:
            # pooled mean+max feature -> per-modality projection
            self.projections = nn.ModuleDict(
                {name: nn.Linear(2 * c, d) for name, d in con_dims.items()}
            )
        if with_rec:
            self.rec_pos_embed = PosEmbed(c)
            self.mask_token = nn.Parameter(torch.zeros(1, 1, c))
            rec_rates = _drop_path_rates(cfg.drop_path, cfg.rec_decoder_depth)
            self.rec_blocks = nn.ModuleList(
                EncoderBlock(c, cfg.heads, cfg.mlp, r) for r in rec_rates
            )
            self.rec_norm = nn.LayerNorm(c)
            self.rec_head = nn.Linear(c, cfg.patch_size * 3)

    def forward(self, batch: TokenBatch):
        """Returns (rec, con_features): masked-patch predictions when the
        reconstruction stream exists, and per-modality projected features."""
        mask = batch.mask_bool()
        b, g, c = batch.embeddings.shape
        n_vis = g - int(mask[0].sum())
        x = (batch.embeddings + batch.pos)[~mask].view(b, n_vis, c)
        if self.with_queries:
            names = list(self.queries.keys())
            q = torch.cat([self.queries[n].expand(b, 1, -1) for n in names], dim=1)
            x = torch.cat([x, q], dim=1)
        for block in self.blocks:
            x, _ = block(x)
        x = self.norm(x)
        if self.with_queries:
            tokens, query_out = x[:, :n_vis], x[:, n_vis:]
            con = {n: self.projections[n](query_out[:, i]) for i, n in enumerate(names)}
        else:
            tokens = x
            pooled = torch.cat([tokens.mean(dim=1), tokens.max(dim=1).values], dim=-1)
            con = {n: proj(pooled) for n, proj in self.projections.items()}
        rec = None
        if self.with_rec:
            centers = torch.stack(
                [torch.from_numpy(ps.centers) for ps in batch.patch_sets]
            ).to(batch.embeddings.dtype)
            rec = self._rec_forward(tokens, mask, self.rec_pos_embed(centers))
        return rec, con

    def _rec_forward(self, encoded_visible, mask_bool, pos_all):
        b, g = mask_bool.shape
        n_masked = int(mask_bool[0].sum())
        if n_masked == 0:
            return None
        c = self.cfg.hidden
        pos_vis = pos_all[~mask_bool].view(b, g - n_masked, c)
        pos_mask = pos_all[mask_bool].view(b, n_masked, c)
        x = torch.cat([encoded_visible, self.mask_token.expand(b, n_masked, c)], dim=1)
        x = x + torch.cat([pos_vis, pos_mask], dim=1)
        for block in self.rec_blocks:
            x, _ = block(x)
        x = self.rec_norm(x[:, -n_masked:])
        return self.rec_head(x).reshape(b, n_masked, self.cfg.patch_size, 3)


class TwoTowerModel(nn.Module):
    """Independent reconstruction and contrastive encoders."""

    def __init__(self, cfg: ModelConfig, con_dims: dict[str, int]):
        super().__init__()
        self.cfg = cfg
        self.rec_tower = PlainEncoderModel(cfg, with_rec=True, with_queries=False)
        self.con_tower = PlainEncoderModel(cfg, with_rec=False, with_queries=False,
                                           con_dims=con_dims)

    def forward(self, batch: TokenBatch, full_batch: TokenBatch):
        rec, _ = self.rec_tower(batch)
        _, con = self.con_tower(full_batch)
        return rec, con


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def seeded_init(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: truncated-normal weights, zero biases; query and
    mask tokens truncated-normal. Leaves the global RNG state untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.apply(_init_weights)
        for name, p in model.named_parameters():
            if name.endswith("mask_token") or ".queries." in name or name.startswith("queries."):
                nn.init.trunc_normal_(p, std=0.02)
    return model


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ReConModel:
    model = ReConModel(cfg)
    seeded_init(model, seed)
    return model.to(dtype)


def parameter_counts(model: nn.Module) -> dict[str, int]:
    """Total trainable parameters, split into the inference-time model and
    the pretraining-only reconstruction stream."""
    prefixes = getattr(model, "PRETRAIN_ONLY_PREFIXES", ("rec_", "mask_token"))
    total = 0
    pretrain_only = 0
    for name, p in model.named_parameters():
        total += p.numel()
        if name.startswith(prefixes):
            pretrain_only += p.numel()
    return {"total": total, "pretrain_only": pretrain_only,
            "inference": total - pretrain_only}


def attention_distance(attention_maps, centers) -> np.ndarray:
    """Attention-weighted mean distance between query and key patch centers.

    attention_maps: per layer (H, T, T) row-stochastic arrays/tensors;
    centers: (T, 3). Returns (layers, heads) of
    mean_q sum_j attn[q, j] * ||center_q - center_j||, in model units.
    """
    centers = np.asarray(centers, dtype=np.float64)
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)  # (T, T)
    out = []
    for layer_map in attention_maps:
        if isinstance(layer_map, torch.Tensor):
            layer_map = layer_map.detach().cpu().numpy()
        m = np.array(layer_map, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != m.shape[2] or m.shape[1] != centers.shape[0]:
            raise ShapeMismatch(f"attention map shape {m.shape} vs {centers.shape[0]} centers")
        row_sums = m.sum(axis=-1)
        if np.abs(row_sums - 1.0).max() > 1e-4:
            raise NotNormalized(f"attention rows deviate from 1 by {np.abs(row_sums - 1.0).max():.2e}")
        out.append((m * dist[None]).sum(axis=-1).mean(axis=-1))  # (H,)
    return np.stack(out)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + float32 LE blob in manifest order

def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1).encode() + b"\n"


def save_checkpoint(path, model: nn.Module, cfg: ModelConfig, arch: str = "recon",
                    arch_args: dict | None = None, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    blob = bytearray()
    for name, p in model.named_parameters():
        arr = p.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blob += arr.tobytes()
    manifest = {
        "format": "RCCKPT1",
        "arch": arch,
        "arch_args": arch_args or {},
        "config": asdict(cfg) | {"queries": list(cfg.queries)},
        "extra": extra or {},
        "tensors": tensors,
    }
    (path / CKPT_MANIFEST).write_bytes(_json_bytes(manifest))
    (path / CKPT_BLOB).write_bytes(bytes(blob))


def _build_arch(arch: str, cfg: ModelConfig, arch_args: dict) -> nn.Module:
    if arch == "recon":
        return ReConModel(cfg)
    if arch == "plain":
        return PlainEncoderModel(cfg, **arch_args)
    if arch == "two_tower":
        return TwoTowerModel(cfg, **arch_args)
    raise BadConfig(f"unknown checkpoint arch {arch!r}")


def load_checkpoint(path):
    """Rebuild (model, cfg, manifest) from a checkpoint directory."""
    path = Path(path)
    manifest = json.loads((path / CKPT_MANIFEST).read_text())
    if manifest.get("format") != "RCCKPT1":
        raise BadMagic(f"{path}: not an RCCKPT1 checkpoint")
    cfg_dict = dict(manifest["config"])
    cfg_dict["queries"] = tuple(cfg_dict["queries"])
    cfg = ModelConfig(**cfg_dict)
    arch_args = dict(manifest.get("arch_args", {}))
    for key in ("con_dims",):
        if key in arch_args and arch_args[key] is not None:
            arch_args[key] = dict(arch_args[key])
    model = _build_arch(manifest.get("arch", "recon"), cfg, arch_args)
    blob = (path / CKPT_BLOB).read_bytes()
    offset = 0
    state = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape)) if shape else 1
        nbytes = numel * 4
        if offset + nbytes > len(blob):
            raise Truncated(f"{path}: blob ends inside tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise Truncated(f"{path}: {len(blob) - offset} trailing bytes in blob")
    model.load_state_dict(state)
    return model, cfg, manifest


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()
