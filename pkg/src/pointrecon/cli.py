"""Command-line entry points.

Subcommands: gen-data, pretrain, finetune, zeroshot, fewshot, attn-dist,
dump-oracle-teacher. A JSON config file supplies the run configuration;
individual flags override it. Exits 0 on success, nonzero with a diagnostic
on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import DatasetManifest, EpisodeSpec, gen_synthetic
from .errors import PointReconError
from .harness import (PRESETS, ModelConfig, OptimizerSpec, ProtocolSpec, RunConfig,
                      TeacherConfig, analyze_attention, fewshot, finetune,
                      pretrain, zeroshot)
from .teachers import OracleTeacher, OracleTeacherSpec, prompt_grid, save_embeddings


def run_config_from_dict(payload: dict) -> RunConfig:
    payload = dict(payload)
    preset = payload.pop("preset", None)
    base = PRESETS[preset]() if preset else RunConfig()
    if "model" in payload:
        model = payload.pop("model")
        model["queries"] = tuple(model.get("queries", base.model.queries))
        base = replace(base, model=ModelConfig(**model))
    if "optimizer" in payload:
        base = replace(base, optimizer=OptimizerSpec(**payload.pop("optimizer")))
    if "teachers" in payload:
        base = replace(base, teachers=TeacherConfig(**payload.pop("teachers")))
    if isinstance(payload.get("augmentation"), dict):
        from pointrecon.geometry import AugmentSpec
        payload["augmentation"] = AugmentSpec(**payload["augmentation"])
    return replace(base, **payload)


def _load_config(args) -> RunConfig:
    payload = {}
    if args.config:
        payload = json.loads(Path(args.config).read_text())
    if args.preset:
        payload["preset"] = args.preset
    cfg = run_config_from_dict(payload)
    overrides = {}
    for name in ("mode", "seed", "out_dir", "data_dir"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name] = value
    if args.metric is not None:
        overrides["contrastive_metric"] = args.metric
    if args.stop_grad is not None:
        overrides["stop_grad"] = args.stop_grad
    cfg = replace(cfg, **overrides)
    if args.mask_ratio is not None:
        cfg = replace(cfg, model=replace(cfg.model, mask_ratio=args.mask_ratio))
    return cfg


def _add_common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mode")
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--metric")
    p.add_argument("--stop-grad", dest="stop_grad", action="store_true", default=None)
    p.add_argument("--no-stop-grad", dest="stop_grad", action="store_false")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pointrecon")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="run a pretraining mode")
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--protocol", default="FULL")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("zeroshot", help="zero-shot classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ensemble", action="store_true", default=True)
    p.add_argument("--no-ensemble", dest="ensemble", action="store_false")

    p = sub.add_parser("fewshot", help="episodic few-shot evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--protocol", default="MLP_LINEAR")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attn-dist", help="attention-distance analysis CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-oracle-teacher", help="write oracle embeddings as RCEMB1")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--modality", choices=("image", "text"), required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (PointReconError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen-data":
        manifest = gen_synthetic(args.classes, args.per_class, args.points,
                                 args.seed, args.out)
        print(json.dumps({"samples": len(manifest.samples),
                          "train": len(manifest.split["train"]),
                          "test": len(manifest.split["test"])}))
        return 0

    if args.command == "pretrain":
        summary = pretrain(_load_config(args))
        print(json.dumps({"checkpoint": summary["checkpoint"],
                          "final": summary["final"]}, sort_keys=True))
        return 0

    if args.command == "finetune":
        manifest = DatasetManifest.load(Path(args.data_dir) / "manifest.json")
        spec = ProtocolSpec(protocol=args.protocol, epochs=args.epochs,
                            lr=args.lr, batch=args.batch)
        result = finetune(args.checkpoint, spec, manifest, seed=args.seed)
        print(json.dumps({k: result[k] for k in ("accuracy", "n_test", "protocol")}))
        return 0

    if args.command == "zeroshot":
        manifest = DatasetManifest.load(Path(args.data_dir) / "manifest.json")
        result = zeroshot(args.checkpoint, manifest, split=args.split,
                          ensemble=args.ensemble)
        print(json.dumps({"accuracy": result["accuracy"], "n": result["n"],
                          "split": result["split"]}))
        return 0

    if args.command == "fewshot":
        manifest = DatasetManifest.load(Path(args.data_dir) / "manifest.json")
        episode = EpisodeSpec(args.ways, args.shots, args.queries, args.runs, args.seed)
        spec = ProtocolSpec(protocol=args.protocol, epochs=args.epochs)
        result = fewshot(args.checkpoint, episode, spec, manifest)
        print(json.dumps({"mean": result["mean"], "std": result["std"]}))
        return 0

    if args.command == "attn-dist":
        manifest = DatasetManifest.load(Path(args.data_dir) / "manifest.json")
        dist = analyze_attention(args.checkpoint, manifest, split=args.split,
                                 out_csv=args.out)
        print(json.dumps({"layers": dist.shape[0], "heads": dist.shape[1]}))
        return 0

    if args.command == "dump-oracle-teacher":
        manifest = DatasetManifest.load(Path(args.data_dir) / "manifest.json")
        spec = OracleTeacherSpec(len(manifest.classes), args.dim, args.sigma, args.seed)
        teacher = OracleTeacher(spec, args.modality)
        records = []
        if args.modality == "image":
            for idx, s in enumerate(manifest.samples):
                records.append((s["image_emb_id"], teacher.vector(s["class_id"], idx)))
        else:
            for cid, name in enumerate(manifest.classes):
                anchor = teacher.class_embedding(cid)
                for prompt in prompt_grid(name):
                    records.append((prompt, anchor))
        save_embeddings(args.out, args.dim, records)
        print(json.dumps({"records": len(records), "dim": args.dim, "out": args.out}))
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
