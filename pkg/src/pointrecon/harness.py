"""Run orchestration: pretraining modes, transfer protocols, evaluation.

Every run is reproducible under its seed when the determinism flag is set
(single thread, fixed batch order, seeded mask draws). Metrics go to
JSON-lines (per step) and CSV (held-out evaluations); model state goes to a
manifest + blob checkpoint.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, EpisodeSpec, sample_episode
from .errors import BadConfig, BadSchedule, MissingTeacher, VariantMismatch
from .geometry import AugmentSpec, augment, read_rcpts
from .losses import (contrastive_metric, mpm_loss, recon_total, supcon_loss,
                     CONTRASTIVE_METRICS)
from .model import (ModelConfig, PlainEncoderModel, ReConModel, TwoTowerModel,
                    attention_distance, load_checkpoint, parameter_checksum,
                    save_checkpoint, seeded_init)
from .teachers import (OracleTeacher, OracleTeacherSpec, load_embeddings,
                       prompt_grid, text_class_embedding)
from .tokenizer import build_token_batch, patchify

MODES = ("recon_cmc", "recon_smc", "cmc_only", "smc_only", "mpm_only", "multitask", "two_tower")
PROTOCOLS = ("FULL", "MLP_LINEAR", "MLP_3")

# contrastive-only baselines are lr-sensitive and get the adjusted preset
MODE_DEFAULT_LR = {"cmc_only": 1e-4, "smc_only": 1e-4}
BASE_LR = 5e-4


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to min_lr."""
    if warmup_steps >= total_steps:
        raise BadSchedule(f"warmup {warmup_steps} must be < total {total_steps}")
    if not 0 <= step < total_steps:
        raise BadSchedule(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerSpec:
    lr: float | None = None          # None -> per-mode default
    weight_decay: float = 5e-2
    epochs: int = 300
    warmup_epochs: int = 10
    batch: int = 128
    min_lr: float = 1e-6
    total_steps: int | None = None   # overrides epochs when set
    warmup_steps: int | None = None


@dataclass
class TeacherConfig:
    source: str = "oracle"           # oracle | files
    dim: int = 64
    sigma: float = 0.1
    seed_img: int = 101
    seed_txt: int = 202
    img_path: str | None = None
    txt_path: str | None = None


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs/run"
    mode: str = "recon_cmc"
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    teachers: TeacherConfig = field(default_factory=TeacherConfig)
    contrastive_metric: str = "smooth_l1"
    stop_grad: bool = True
    freeze_teachers: bool = True
    augmentation: AugmentSpec | None = None
    rec_weight: float = 1.0
    con_weight: float = 1.0
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise BadConfig(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if self.contrastive_metric not in CONTRASTIVE_METRICS:
            raise BadConfig(f"unknown contrastive metric {self.contrastive_metric!r}")
        if not self.freeze_teachers:
            raise BadConfig("unfreezing teachers is out of scope; freeze_teachers must stay True")
        if self.optimizer.lr is not None and self.optimizer.lr <= 0:
            raise BadConfig("lr must be positive")
        if self.optimizer.warmup_epochs > self.optimizer.epochs:
            raise BadConfig("warmup_epochs must be <= epochs")

    @property
    def lr(self) -> float:
        if self.optimizer.lr is not None:
            return self.optimizer.lr
        return MODE_DEFAULT_LR.get(self.mode, BASE_LR)


@dataclass
class ProtocolSpec:
    protocol: str = "FULL"
    head_widths: tuple[int, int] = (256, 256)
    epochs: int = 50
    lr: float | None = None          # None -> 2e-5 FULL, 1e-3 frozen heads
    batch: int = 16
    augmentation: AugmentSpec | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise BadConfig(f"unknown protocol {self.protocol!r}; pick one of {PROTOCOLS}")

    @property
    def frozen(self) -> bool:
        return self.protocol != "FULL"

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        # end-to-end tuning wants the gentle classification recipe; fresh
        # heads on frozen features train fast at a higher rate
        return 2e-5 if self.protocol == "FULL" else 1e-3


def micro_preset(**overrides) -> RunConfig:
    """CPU-minutes preset: Tiny-shaped stack at hidden 64, 16x16 patches."""
    cfg = RunConfig(
        model=ModelConfig(layers=12, hidden=64, mlp=256, heads=4,
                          num_patches=16, patch_size=16, drop_path=0.0,
                          embed_stage1=32, embed_stage2=64),
        optimizer=OptimizerSpec(batch=16, total_steps=2000, warmup_steps=100),
        eval_every=200,
    )
    return replace(cfg, **overrides)


def tiny_preset(**overrides) -> RunConfig:
    cfg = RunConfig(
        model=ModelConfig.variant("Tiny"),
        optimizer=OptimizerSpec(batch=32),
    )
    return replace(cfg, **overrides)


PRESETS = {"micro": micro_preset, "tiny": tiny_preset}


def _stable_seed(*parts) -> int:
    key = "/".join(str(p) for p in parts).encode()
    return zlib.crc32(key)


def _apply_determinism(cfg_seed: int, enabled: bool):
    if enabled:
        torch.set_num_threads(1)
    torch.manual_seed(cfg_seed)


def _fmt(x: float) -> float:
    return float(x)


class _Teachers:
    """Resolved per-modality targets for a manifest."""

    def __init__(self, config: TeacherConfig, manifest: DatasetManifest, modalities):
        self.config = config
        self.modalities = tuple(modalities)
        self.backends = {}
        self.targets = {}      # modality -> {sample_id: np vector}
        sample_index = {s["id"]: i for i, s in enumerate(manifest.samples)}
        for modality in self.modalities:
            if config.source == "oracle":
                seed = config.seed_img if modality == "IMG" else config.seed_txt
                backend = OracleTeacher(
                    OracleTeacherSpec(len(manifest.classes), config.dim,
                                      config.sigma, seed),
                    modality="image" if modality == "IMG" else "text",
                )
                table = {}
                for s in manifest.samples:
                    key = s["image_emb_id"] if modality == "IMG" else s["id"]
                    table[s["id"]] = backend.vector(s["class_id"], sample_index[key])
            elif config.source == "files":
                path = config.img_path if modality == "IMG" else config.txt_path
                if path is None:
                    raise MissingTeacher(f"no embedding file configured for {modality}")
                backend = load_embeddings(path, "image" if modality == "IMG" else "text")
                keys = {
                    s["id"]: (s["image_emb_id"] if modality == "IMG" else s["text"])
                    for s in manifest.samples
                }
                table = {sid: backend.lookup([k])[0] for sid, k in keys.items()}
            else:
                raise MissingTeacher(f"unknown teacher source {config.source!r}")
            self.backends[modality] = backend
            self.targets[modality] = table

    def dim(self, modality: str) -> int:
        return self.backends[modality].dim

    def batch(self, modality: str, ids, dtype=torch.float32) -> torch.Tensor:
        rows = np.stack([self.targets[modality][i] for i in ids])
        return torch.from_numpy(rows).to(dtype)


def _mode_modalities(mode: str):
    if mode in ("recon_cmc", "cmc_only", "multitask", "two_tower"):
        return ("IMG", "TXT")
    if mode in ("recon_smc", "smc_only"):
        return ()
    return ()  # mpm_only


def build_pretrain_model(config: RunConfig, manifest: DatasetManifest,
                         teachers: _Teachers):
    """Construct the mode-appropriate network, deterministically initialized."""
    mode = config.mode
    mc = config.model
    if mode == "recon_cmc":
        cfg = replace(mc, queries=("IMG", "TXT"),
                      img_dim=teachers.dim("IMG"), txt_dim=teachers.dim("TXT"))
        model, arch, args = ReConModel(cfg), "recon", {}
    elif mode == "recon_smc":
        cfg = replace(mc, queries=("SELF",))
        model, arch, args = ReConModel(cfg), "recon", {}
    elif mode == "cmc_only":
        cfg = mc
        args = {"with_rec": False, "with_queries": False,
                "con_dims": {"IMG": teachers.dim("IMG"), "TXT": teachers.dim("TXT")}}
        model, arch = PlainEncoderModel(cfg, **args), "plain"
    elif mode == "smc_only":
        cfg = mc
        args = {"with_rec": False, "with_queries": False, "con_dims": {"SELF": mc.self_dim}}
        model, arch = PlainEncoderModel(cfg, **args), "plain"
    elif mode == "mpm_only":
        cfg = mc
        args = {"with_rec": True, "with_queries": False, "con_dims": None}
        model, arch = PlainEncoderModel(cfg, **args), "plain"
    elif mode == "multitask":
        cfg = mc
        args = {"with_rec": True, "with_queries": True,
                "con_dims": {"IMG": teachers.dim("IMG"), "TXT": teachers.dim("TXT")}}
        model, arch = PlainEncoderModel(cfg, **args), "plain"
    else:  # two_tower
        cfg = mc
        args = {"con_dims": {"IMG": teachers.dim("IMG"), "TXT": teachers.dim("TXT")}}
        model, arch = TwoTowerModel(cfg, **args), "two_tower"
    seeded_init(model, config.seed)
    return model, cfg, arch, args


class PretrainRun:
    def __init__(self, config: RunConfig):
        self.config = config
        self.manifest = DatasetManifest.load(Path(config.data_dir) / "manifest.json")
        self.modalities = _mode_modalities(config.mode)
        self.teachers = _Teachers(config.teachers, self.manifest, self.modalities)
        self.model, self.model_cfg, self.arch, self.arch_args = build_pretrain_model(
            config, self.manifest, self.teachers)
        self.metric = contrastive_metric(config.contrastive_metric)
        self.clouds = {
            sid: read_rcpts(self.manifest.cloud_path(sid), sid)
            for sid in (s["id"] for s in self.manifest.samples)
        }
        self._patch_cache = {}
        self.train_ids = self.manifest.ids("train")
        self.test_ids = self.manifest.ids("test")
        n = len(self.train_ids)
        batch = min(config.optimizer.batch, n)
        self.batch = batch
        steps_per_epoch = max(1, n // batch)
        opt = config.optimizer
        self.total_steps = opt.total_steps or opt.epochs * steps_per_epoch
        self.warmup_steps = (opt.warmup_steps if opt.warmup_steps is not None
                             else opt.warmup_epochs * steps_per_epoch)
        self.steps_per_epoch = steps_per_epoch

    # -- data plumbing ------------------------------------------------------

    def _patch_sets(self, ids, epoch: int | None = None):
        aug = self.config.augmentation
        mc = self.model_cfg
        out = []
        for sid in ids:
            if aug is None or epoch is None:  # eval always sees clean clouds
                if sid not in self._patch_cache:
                    self._patch_cache[sid] = patchify(
                        self.clouds[sid], mc.num_patches, mc.patch_size,
                        seed=_stable_seed(self.config.seed, sid))
                out.append(self._patch_cache[sid])
            else:
                spec = replace(aug, seed=_stable_seed(self.config.seed, sid, epoch))
                pc = augment(self.clouds[sid], spec)
                out.append(patchify(pc, mc.num_patches, mc.patch_size,
                                    seed=_stable_seed(self.config.seed, sid)))
        return out

    def _token_batch(self, patch_sets, ratio: float, mask_seed: int, embedder):
        return build_token_batch(patch_sets, embedder.patch_embed, embedder.pos_embed,
                                 ratio=ratio, seed=mask_seed)

    @staticmethod
    def _gt_masked(batch):
        mask = batch.mask_bool()
        if int(mask.sum()) == 0:
            return None
        groups = torch.stack([torch.from_numpy(ps.groups) for ps in batch.patch_sets])
        groups = groups.to(batch.embeddings.dtype)
        b, g = mask.shape
        m = int(mask[0].sum())
        return groups[mask].view(b, m, *groups.shape[-2:])

    # -- per-mode loss ------------------------------------------------------

    def _con_terms(self, features: dict, ids, labels) -> tuple[torch.Tensor, dict]:
        mode = self.config.mode
        zero = torch.zeros(())
        if mode in ("recon_smc", "smc_only"):
            feats = F.normalize(features["SELF"], dim=-1)
            con = supcon_loss(feats, torch.as_tensor(labels))
            return con, {"SELF": float(con.detach())}
        if not self.modalities:
            return zero, {}
        parts = {}
        total = zero
        for modality in self.modalities:
            teacher = self.teachers.batch(modality, ids, features[modality].dtype)
            term = self.metric(features[modality], teacher)
            parts[modality] = float(term.detach())
            total = total + term
        return total, parts

    def _batch_loss(self, ids, step: int, epoch: int, train: bool = True):
        cfg = self.config
        mc = self.model_cfg
        labels = self.manifest.class_ids_of(ids)
        patch_sets = self._patch_sets(ids, epoch)
        mask_seed = _stable_seed(cfg.seed, "mask", step)
        mode = cfg.mode
        if mode in ("recon_cmc", "recon_smc"):
            batch = self._token_batch(patch_sets, mc.mask_ratio, mask_seed, self.model)
            out = self.model(batch, stop_grad=cfg.stop_grad)
            rec = mpm_loss(out.reconstructed_patches, self._gt_masked(batch))
            student = out.global_features
            con, parts = self._con_terms(student, ids, labels)
        elif mode in ("cmc_only", "smc_only"):
            batch = self._token_batch(patch_sets, 0.0, mask_seed, self.model)
            _, student = self.model(batch)
            rec = torch.zeros(())
            con, parts = self._con_terms(student, ids, labels)
        elif mode == "mpm_only":
            batch = self._token_batch(patch_sets, mc.mask_ratio, mask_seed, self.model)
            pred, _ = self.model(batch)
            rec = mpm_loss(pred, self._gt_masked(batch))
            con, parts = torch.zeros(()), {}
        elif mode == "multitask":
            batch = self._token_batch(patch_sets, mc.mask_ratio, mask_seed, self.model)
            pred, student = self.model(batch)
            rec = mpm_loss(pred, self._gt_masked(batch))
            con, parts = self._con_terms(student, ids, labels)
        else:  # two_tower
            masked = self._token_batch(patch_sets, mc.mask_ratio, mask_seed, self.model.rec_tower)
            full = self._token_batch(patch_sets, 0.0, mask_seed, self.model.con_tower)
            pred, student = self.model(masked, full)
            rec = mpm_loss(pred, self._gt_masked(masked))
            con, parts = self._con_terms(student, ids, labels)
        rec = cfg.rec_weight * rec
        con = cfg.con_weight * con
        loss = rec + con
        report = recon_total(float(rec.detach()), float(con.detach()), parts)
        return loss, report

    # -- evaluation ---------------------------------------------------------

    def evaluate_heldout(self, ids=None) -> dict:
        """Held-out per-sample losses under fixed eval masks; no gradients.

        rec reports come out of mpm_loss as per-patch means, con reports as
        batch sums, so the two aggregate differently.
        """
        ids = list(ids if ids is not None else self.test_ids)
        self.model.eval()
        rec_weighted, con_sum, n = 0.0, 0.0, 0
        with torch.no_grad():
            for lo in range(0, len(ids), self.batch):
                chunk = ids[lo : lo + self.batch]
                if len(chunk) < 2:
                    continue
                _, report = self._batch_loss(chunk, step=-1 - lo, epoch=None, train=False)
                rec_weighted += report.rec * len(chunk)
                con_sum += report.con
                n += len(chunk)
        self.model.train()
        n = max(n, 1)
        return {"heldout_rec": rec_weighted / n, "heldout_con": con_sum / n}

    # -- training loop ------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        _apply_determinism(cfg.seed, cfg.deterministic)
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr,
                                      weight_decay=cfg.optimizer.weight_decay,
                                      betas=(0.9, 0.999), eps=1e-8)
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB1]))
        step = 0
        self.model.train()
        eval_rows = []
        last_report = None
        with open(out_dir / "metrics.jsonl", "w") as jsonl:
            while step < self.total_steps:
                epoch = step // self.steps_per_epoch
                perm = order_rng.permutation(len(self.train_ids))
                for lo in range(0, len(perm) - self.batch + 1, self.batch):
                    ids = [self.train_ids[k] for k in perm[lo : lo + self.batch]]
                    lr = lr_schedule(step, self.total_steps, self.warmup_steps,
                                     cfg.lr, cfg.optimizer.min_lr)
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    loss, report = self._batch_loss(ids, step, epoch)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    last_report = report
                    record = {"step": step, "lr": _fmt(lr), "total": _fmt(report.total),
                              "rec": _fmt(report.rec), "con": _fmt(report.con)}
                    for k, v in report.con_components.items():
                        record[f"con_{k}"] = _fmt(v)
                    jsonl.write(json.dumps(record, sort_keys=True) + "\n")
                    step += 1
                    if step % cfg.eval_every == 0 or step == self.total_steps:
                        ev = self.evaluate_heldout()
                        eval_rows.append({"step": step, **ev})
                    if step >= self.total_steps:
                        break
        with open(out_dir / "eval.csv", "w") as f:
            f.write("step,heldout_rec,heldout_con\n")
            for row in eval_rows:
                f.write(f"{row['step']},{row['heldout_rec']!r},{row['heldout_con']!r}\n")
        ckpt_dir = out_dir / "checkpoint"
        extra = {
            "mode": cfg.mode,
            "seed": cfg.seed,
            "contrastive_metric": cfg.contrastive_metric,
            "stop_grad": cfg.stop_grad,
            "teachers": asdict(cfg.teachers),
        }
        save_checkpoint(ckpt_dir, self.model, self.model_cfg, arch=self.arch,
                        arch_args=self.arch_args, extra=extra)
        summary = {
            "final": asdict(last_report) if last_report else None,
            "eval": eval_rows,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        return {"checkpoint": str(ckpt_dir), **summary}


def pretrain(config: RunConfig) -> dict:
    return PretrainRun(config).run()


# ---------------------------------------------------------------------------
# transfer: fine-tuning protocols


class FineTuneClassifier(torch.nn.Module):
    """Pretrained backbone plus a fresh [CLS] query and a classification head.

    The per-sample feature concatenates mean- and max-pooled local tokens
    with every global query output; stop-gradient is cancelled on all
    cross-attention connections during fine-tuning.
    """

    def __init__(self, backbone: ReConModel, n_classes: int, protocol: ProtocolSpec):
        super().__init__()
        self.backbone = backbone
        self.protocol = protocol
        c = backbone.cfg.hidden
        feat_dim = 2 * c + len(backbone.cfg.queries) * c
        if protocol.protocol == "MLP_3":
            w1, w2 = protocol.head_widths
            self.head = torch.nn.Sequential(
                torch.nn.Linear(feat_dim, w1), torch.nn.GELU(),
                torch.nn.Linear(w1, w2), torch.nn.GELU(),
                torch.nn.Linear(w2, n_classes),
            )
        else:
            self.head = torch.nn.Linear(feat_dim, n_classes)

    def features(self, batch) -> torch.Tensor:
        out = self.backbone(batch, stop_grad=False)
        local = out.encoder_final
        names = list(self.backbone.cfg.queries)
        parts = [local.mean(dim=1), local.max(dim=1).values]
        parts += [out.query_features[n] for n in names]
        return torch.cat(parts, dim=-1)

    def forward(self, batch) -> torch.Tensor:
        return self.head(self.features(batch))


def _load_recon_backbone(checkpoint_path, with_cls: bool = True) -> tuple[ReConModel, dict]:
    model, cfg, manifest = load_checkpoint(checkpoint_path)
    if manifest.get("arch") != "recon":
        raise VariantMismatch(
            f"transfer needs a two-stream checkpoint, got arch {manifest.get('arch')!r}")
    if not with_cls or "CLS" in cfg.queries:
        return model, manifest
    new_cfg = replace(cfg, queries=tuple(cfg.queries) + ("CLS",))
    new_model = ReConModel(new_cfg)
    seeded_init(new_model, int(manifest.get("extra", {}).get("seed", 0)) + 1)
    missing, unexpected = new_model.load_state_dict(model.state_dict(), strict=False)
    assert not unexpected and all("CLS" in k for k in missing)
    return new_model, manifest


def _batchify_ids(ids, batch):
    for lo in range(0, len(ids), batch):
        yield ids[lo : lo + batch]


class _TransferData:
    """Patchified views of a manifest for transfer runs."""

    def __init__(self, manifest: DatasetManifest, cfg: ModelConfig, seed: int):
        self.manifest = manifest
        self.cfg = cfg
        self.seed = seed
        self.clouds = {}
        self.cache = {}

    def patch_sets(self, ids, aug: AugmentSpec | None = None, epoch: int | None = None):
        out = []
        for sid in ids:
            if sid not in self.clouds:
                self.clouds[sid] = read_rcpts(self.manifest.cloud_path(sid), sid)
            if aug is None or epoch is None:
                if sid not in self.cache:
                    self.cache[sid] = patchify(self.clouds[sid], self.cfg.num_patches,
                                               self.cfg.patch_size,
                                               seed=_stable_seed(self.seed, sid))
                out.append(self.cache[sid])
            else:
                spec = replace(aug, seed=_stable_seed(self.seed, sid, epoch))
                pc = augment(self.clouds[sid], spec)
                out.append(patchify(pc, self.cfg.num_patches, self.cfg.patch_size,
                                    seed=_stable_seed(self.seed, sid)))
        return out


def finetune(checkpoint_path, protocol: ProtocolSpec, manifest: DatasetManifest,
             seed: int = 0, train_ids=None, test_ids=None,
             deterministic: bool = True) -> dict:
    """Fine-tune per protocol and report top-1 accuracy on the test ids."""
    _apply_determinism(seed, deterministic)
    backbone, ck_manifest = _load_recon_backbone(checkpoint_path)
    clf = FineTuneClassifier(backbone, len(manifest.classes), protocol)
    seeded_init(clf.head, seed + 2)
    train_ids = list(train_ids if train_ids is not None else manifest.ids("train"))
    test_ids = list(test_ids if test_ids is not None else manifest.ids("test"))
    data = _TransferData(manifest, backbone.cfg, seed)
    labels = {i: manifest.by_id(i)["class_id"] for i in train_ids + test_ids}

    if protocol.frozen:
        clf.backbone.requires_grad_(False)
        groups = [{"params": list(clf.head.parameters()), "lr": protocol.effective_lr}]
    else:
        # pretrained backbone keeps the gentle rate; the fresh head needs the
        # fast one or it barely moves within a desk-scale epoch budget
        groups = [
            {"params": list(clf.backbone.parameters()), "lr": protocol.effective_lr},
            {"params": list(clf.head.parameters()), "lr": 1e-3},
        ]
    optimizer = torch.optim.AdamW(groups, weight_decay=5e-2)

    def batch_features(ids, aug=None, epoch=None, grad=True):
        ps = data.patch_sets(ids, aug, epoch)
        tb = build_token_batch(ps, clf.backbone.patch_embed, clf.backbone.pos_embed,
                               ratio=0.0, seed=0)
        if grad:
            return clf(tb)
        with torch.no_grad():
            return clf(tb)

    frozen_feats = None
    if protocol.frozen and protocol.augmentation is None:
        clf.backbone.eval()
        with torch.no_grad():
            feats = []
            for chunk in _batchify_ids(train_ids, protocol.batch):
                ps = data.patch_sets(chunk)
                tb = build_token_batch(ps, clf.backbone.patch_embed,
                                       clf.backbone.pos_embed, ratio=0.0, seed=0)
                feats.append(clf.features(tb))
            frozen_feats = torch.cat(feats) if feats else None

    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF7]))
    clf.train()
    if protocol.frozen:
        clf.backbone.eval()
    y_train = torch.as_tensor([labels[i] for i in train_ids])
    for epoch in range(protocol.epochs):
        perm = order_rng.permutation(len(train_ids))
        for lo in range(0, len(perm), protocol.batch):
            sel = perm[lo : lo + protocol.batch]
            ids = [train_ids[k] for k in sel]
            if frozen_feats is not None:
                logits = clf.head(frozen_feats[sel])
            else:
                logits = batch_features(ids, protocol.augmentation, epoch)
            loss = F.cross_entropy(logits, y_train[sel])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    clf.eval()
    correct = 0
    preds = {}
    with torch.no_grad():
        for chunk in _batchify_ids(test_ids, protocol.batch):
            logits = batch_features(chunk, grad=False)
            top1 = logits.argmax(dim=-1)
            for sid, p in zip(chunk, top1.tolist()):
                preds[sid] = p
                correct += int(p == labels[sid])
    acc = correct / max(1, len(test_ids))
    return {"accuracy": acc, "n_test": len(test_ids), "protocol": protocol.protocol,
            "predictions": preds,
            "backbone_checksum": parameter_checksum(clf.backbone)}


# ---------------------------------------------------------------------------
# zero-shot and few-shot evaluation


def _fused_features(backbone: ReConModel, data: _TransferData, ids, batch: int = 32):
    """Normalized [IMG]+[TXT] projected features per sample."""
    feats = []
    backbone.eval()
    with torch.no_grad():
        for chunk in _batchify_ids(ids, batch):
            ps = data.patch_sets(chunk)
            tb = build_token_batch(ps, backbone.patch_embed, backbone.pos_embed,
                                   ratio=0.0, seed=0)
            out = backbone(tb, stop_grad=True)
            if "IMG" not in out.global_features or "TXT" not in out.global_features:
                raise MissingTeacher("zero-shot needs IMG and TXT query projections")
            img = out.global_features["IMG"]
            txt = out.global_features["TXT"]
            if img.shape[-1] != txt.shape[-1]:
                raise MissingTeacher(
                    f"IMG dim {img.shape[-1]} != TXT dim {txt.shape[-1]}; cannot fuse by sum")
            feats.append(F.normalize(img + txt, dim=-1))
    return torch.cat(feats)


def _resolve_text_teacher(teacher_cfg: dict, n_classes: int):
    cfg = TeacherConfig(**teacher_cfg)
    if cfg.source == "oracle":
        return OracleTeacher(OracleTeacherSpec(n_classes, cfg.dim, cfg.sigma, cfg.seed_txt),
                             modality="text")
    if cfg.txt_path is None:
        raise MissingTeacher("checkpoint has no text teacher configured")
    return load_embeddings(cfg.txt_path, "text")


def zeroshot(checkpoint_path, manifest: DatasetManifest, split: str = "test",
             ensemble: bool = True, prompts_per_class: dict | None = None,
             text_teacher=None, ensemble_mode: str = "embedding_mean") -> dict:
    """Cosine zero-shot classification against class text embeddings.

    Sample feature: elementwise sum of the projected [IMG] and [TXT] query
    features, normalized. Ties resolve to the lower class index.
    """
    backbone, ck_manifest = _load_recon_backbone(checkpoint_path, with_cls=False)
    if text_teacher is None:
        teacher_cfg = ck_manifest.get("extra", {}).get("teachers")
        if teacher_cfg is None:
            raise MissingTeacher("checkpoint records no teacher config; pass text_teacher")
        text_teacher = _resolve_text_teacher(teacher_cfg, len(manifest.classes))
    data = _TransferData(manifest, backbone.cfg, int(ck_manifest["extra"].get("seed", 0)))
    ids = manifest.ids(split)
    feats = _fused_features(backbone, data, ids).numpy().astype(np.float64)

    class_prompts = {}
    for name in manifest.classes:
        if prompts_per_class is not None:
            class_prompts[name] = list(prompts_per_class[name])
        else:
            class_prompts[name] = prompt_grid(name) if ensemble else [name]

    if text_teacher.dim != feats.shape[1]:
        raise MissingTeacher(
            f"text teacher dim {text_teacher.dim} != fused feature dim {feats.shape[1]}")
    if ensemble_mode == "similarity_mean" and not isinstance(text_teacher, OracleTeacher):
        scores = np.stack([
            (feats @ text_teacher.prompt_embeddings(class_prompts[name]).T.astype(np.float64))
            .mean(axis=1)
            for name in manifest.classes
        ], axis=1)
    else:
        class_emb = np.stack([
            text_class_embedding(text_teacher, name, class_prompts[name], class_id=cid)
            for cid, name in enumerate(manifest.classes)
        ]).astype(np.float64)
        class_emb /= np.linalg.norm(class_emb, axis=1, keepdims=True)
        scores = feats @ class_emb.T
    pred = scores.argmax(axis=1)
    truth = manifest.class_ids_of(ids)
    acc = float((pred == truth).mean())
    return {"accuracy": acc, "split": split, "n": len(ids),
            "predictions": {sid: int(p) for sid, p in zip(ids, pred)},
            "scores": scores}


def fewshot(checkpoint_path, episode: EpisodeSpec, protocol: ProtocolSpec,
            manifest: DatasetManifest) -> dict:
    """Episodic transfer: fine-tune on support, evaluate on query, repeat."""
    accs = []
    for run in range(episode.runs):
        support, query = sample_episode(manifest, episode, run)
        result = finetune(checkpoint_path, protocol, manifest,
                          seed=episode.seed + run, train_ids=support, test_ids=query)
        accs.append(result["accuracy"])
    arr = np.array(accs)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "per_run": accs}


def analyze_attention(checkpoint_path, manifest: DatasetManifest, split: str = "test",
                      out_csv=None) -> np.ndarray:
    """Per-layer, per-head attention distances averaged over a split."""
    backbone, ck_manifest = _load_recon_backbone(checkpoint_path, with_cls=False)
    data = _TransferData(manifest, backbone.cfg, int(ck_manifest["extra"].get("seed", 0)))
    ids = manifest.ids(split)
    backbone.eval()
    acc = None
    with torch.no_grad():
        for sid in ids:
            ps = data.patch_sets([sid])
            tb = build_token_batch(ps, backbone.patch_embed, backbone.pos_embed,
                                   ratio=0.0, seed=0)
            out = backbone(tb, capture_attention=True)
            maps = [m[0] for m in out.attention_maps]  # single-sample batch
            dist = attention_distance(maps, ps[0].centers)
            acc = dist if acc is None else acc + dist
    mean = acc / len(ids)
    if out_csv is not None:
        with open(out_csv, "w") as f:
            f.write("layer,head,mean_distance\n")
            for layer in range(mean.shape[0]):
                for head in range(mean.shape[1]):
                    f.write(f"{layer},{head},{float(mean[layer, head])!r}\n")
    return mean

