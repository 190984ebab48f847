"""Command-line entry point.

Subcommands: gen-data, pretrain, train, fewshot, eval, retrieve, viz.
Options come from an optional JSON config file (sections: model, train,
data, eval) overridden by command-line flags; flags always win. Every
output artifact records the hash of the resolved configuration. The
ANSEG_THREADS environment variable bounds the torch worker count.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np
import torch

from . import dataset, train, viz
from .dataset import (build_splits, read_manifest, read_scene, sample_episode,
                      write_manifest, write_scene)
from .evaluation import write_report
from .modulator import MODE_ANALOGICAL, MODE_DETR3D, MODES
from .retriever import (build_repository, load_repository, retrieve_topk,
                        save_repository)
from .shapes import ALL_CATEGORIES, BASE_CATEGORIES, NOVEL_CATEGORIES, generate_scene

logger = logging.getLogger(__name__)

# config-file keys accepted per section, all mapping onto TrainConfig fields
# or data/eval parameters; anything else is rejected.
CONFIG_SECTIONS = {
    "model": ("mode", "channels", "layers", "heads", "parametric_queries",
              "memories_per_forward"),
    "train": ("seg_mode", "lr", "batch_size", "epochs", "weight_decay", "seed",
              "topk_pool", "within_every", "level_constrained", "train_points",
              "grad_clip", "lr_cosine_to", "dtype", "finetune_lr",
              "finetune_batch_size", "finetune_epochs",
              "aug_rotate", "aug_deform"),
    "data": ("categories", "per_category", "novel_per_category", "split_seed"),
    "eval": ("shots", "episodes", "adapt", "levels", "k"),
}
DATA_DEFAULTS = {"categories": list(ALL_CATEGORIES), "per_category": 120,
                 "novel_per_category": 20, "split_seed": 0}
EVAL_DEFAULTS = {"shots": 5, "episodes": 10, "adapt": "none",
                 "levels": [1, 2, 3], "k": 1}


class UsageError(ValueError):
    pass


def load_config(path=None):
    """Resolved {section: {key: value}} with defaults; unknown keys rejected."""
    doc = {}
    if path:
        with open(path) as f:
            doc = json.load(f)
    for section, keys in doc.items():
        if section not in CONFIG_SECTIONS:
            raise UsageError(f"unknown config section {section!r}")
        for key in keys:
            if key not in CONFIG_SECTIONS[section]:
                raise UsageError(f"unknown config key {section}.{key}")
    out = {s: dict(doc.get(s, {})) for s in CONFIG_SECTIONS}
    for k, v in DATA_DEFAULTS.items():
        out["data"].setdefault(k, v)
    for k, v in EVAL_DEFAULTS.items():
        out["eval"].setdefault(k, v)
    return out


def apply_overrides(config, args, mapping):
    """Copy non-None parsed flags into their config slots; flags win."""
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            config[section][key] = value
    return config


def config_hash(config) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_config(config) -> train.TrainConfig:
    fields = {f.name for f in dataclasses.fields(train.TrainConfig)}
    merged = {**config["model"], **config["train"]}
    return train.TrainConfig(**{k: v for k, v in merged.items() if k in fields})


def _load_scenes(data_dir, splits=None, categories=None):
    manifest = read_manifest(os.path.join(data_dir, "manifest.json"))
    scenes = []
    for rec in manifest:
        if splits and rec["split"] not in splits:
            continue
        if categories and rec["category"] not in categories:
            continue
        scenes.append(read_scene(os.path.join(data_dir, rec["path"])))
    if not scenes:
        raise dataset.InsufficientDataError("no scenes match the requested split")
    return manifest, scenes


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, config):
    cats = config["data"]["categories"]
    unknown = [c for c in cats if c not in ALL_CATEGORIES]
    if unknown:
        raise UsageError(f"unknown categories: {unknown}")
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for cat in cats:
        n = (config["data"]["per_category"] if cat in BASE_CATEGORIES
             else config["data"]["novel_per_category"])
        for i in range(n):
            scene = generate_scene(cat, args.seed + i)
            write_scene(scene, os.path.join(args.out, f"{scene.scene_id}.json"))
            count += 1
    manifest = build_splits(args.out, BASE_CATEGORIES, NOVEL_CATEGORIES,
                            seed=config["data"]["split_seed"])
    write_manifest(manifest, os.path.join(args.out, "manifest.json"))
    print(f"wrote {count} scenes + manifest to {args.out} "
          f"(config {config_hash(config)})")


def cmd_pretrain(args, config):
    cfg = train_config(config)
    _, scenes = _load_scenes(args.data, splits={"base-train"})
    vocab = train.semantic_vocabulary(scenes)
    model = train.build_model(cfg, semantic_vocab=vocab)
    train.pretrain_within_scene(scenes, cfg, model=model)
    train.save_checkpoint(model, cfg, args.out, stage="within-scene",
                          extra_meta={"config_hash": config_hash(config)})
    print(f"wrote checkpoint {args.out} (config {config_hash(config)})")


def cmd_train(args, config):
    model, cfg, meta = train.load_checkpoint(args.ckpt)
    cfg = train_config(config)
    if cfg.mode != model.config.mode:
        # same weights, different decoding/loss behavior
        model2 = train.build_model(cfg, semantic_vocab=model.semantic_vocab)
        model2.load_state_dict(model.state_dict())
        model = model2
    _, scenes = _load_scenes(args.data, splits={"base-train"})
    frozen = train.freeze_retriever_encoder(model)
    repo = None
    if cfg.mode != MODE_DETR3D:
        repo = build_repository(scenes, frozen)
        if args.repo:
            save_repository(repo, args.repo)
    train.train_cross_scene(scenes, model, repo, cfg, frozen_encoder=frozen)
    train.save_checkpoint(
        model, cfg, args.out, stage="cross-scene", frozen_encoder=frozen,
        extra_meta={"config_hash": config_hash(config)})
    print(f"wrote checkpoint {args.out} (config {config_hash(config)})")


def _model_and_frozen(args):
    model, cfg, meta = train.load_checkpoint(args.ckpt)
    model.eval()
    frozen = train.load_frozen_encoder(args.ckpt)
    if frozen is None:  # stage-1 checkpoint: the encoder has not diverged yet
        frozen = train.freeze_retriever_encoder(model)
    return model, frozen, cfg, meta


def cmd_fewshot(args, config):
    model, frozen, cfg, _ = _model_and_frozen(args)
    if model.config.mode == MODE_DETR3D and config["eval"]["adapt"] == "none":
        raise UsageError("detr3d mode has no memory to expand; use --adapt finetune")
    manifest, _ = _load_scenes(args.data, splits={"novel-pool"})
    scenes_by_id = {}
    episodes = []
    shots, n_ep = config["eval"]["shots"], config["eval"]["episodes"]
    for cat in sorted({r["category"] for r in manifest if r["split"] == "novel-pool"}):
        for e in range(n_ep):
            ep = sample_episode(manifest, cat, shots, episode_seed=args.seed + e)
            episodes.append(ep)
            for sid in ep.support_ids + ep.query_ids:
                if sid not in scenes_by_id:
                    rec = next(r for r in manifest if r["scene_id"] == sid)
                    scenes_by_id[sid] = read_scene(os.path.join(args.data, rec["path"]))
    report = train.run_episodes(
        model, frozen, episodes, scenes_by_id, cfg,
        adapt=config["eval"]["adapt"], levels=tuple(config["eval"]["levels"]))
    write_report(report, args.report, config_hash=config_hash(config), seed=args.seed)
    print(f"wrote report {args.report} (config {config_hash(config)})")


def cmd_eval(args, config):
    model, frozen, cfg, _ = _model_and_frozen(args)
    if model.config.mode == MODE_DETR3D and args.k is not None:
        raise UsageError("--k is meaningless in detr3d mode (no memories)")
    _, scenes = _load_scenes(args.data, splits={args.split})
    repo = None
    if model.config.mode != MODE_DETR3D:
        _, train_scenes = _load_scenes(args.data, splits={"base-train"})
        repo = build_repository(train_scenes, frozen)
    report = train.evaluate_scenes(
        model, scenes, levels=tuple(config["eval"]["levels"]), repo=repo,
        frozen_encoder=frozen, memories_per_forward=config["eval"]["k"])
    write_report(report, args.report, config_hash=config_hash(config), seed=args.seed)
    print(f"wrote report {args.report} (config {config_hash(config)})")


def cmd_retrieve(args, config):
    _, frozen, _, _ = _model_and_frozen(args)
    repo = load_repository(args.repo)
    scene = read_scene(args.scene)
    ranked = retrieve_topk(repo, scene.points, args.topk, frozen_encoder=frozen,
                           exclude_scene_id=scene.scene_id if args.exclude_self
                           else None)
    for entry, score in ranked:
        print(f"{entry.scene_id}\tlevel={entry.level}\t{score:.6f}")


def cmd_viz(args, config):
    model, frozen, cfg, _ = _model_and_frozen(args)
    scene = read_scene(args.scene)
    os.makedirs(args.out, exist_ok=True)
    mems = []
    if model.config.mode != MODE_DETR3D:
        repo = load_repository(args.repo)
        ranked = retrieve_topk(repo, scene.points, 1, frozen_encoder=frozen,
                               level_constraint=args.level)
        entry = ranked[0][0]
        mems = [(entry.scene, entry.level)]
        viz.export_memory(os.path.join(args.out, "memory.ply"), entry.scene,
                          entry.level)
    with torch.no_grad():
        pred = model(scene.points, memories=mems, level=args.level)
    from .evaluation import assign_points
    assignment = assign_points(pred)
    viz.export_segmentation(os.path.join(args.out, "input.ply"), scene.points,
                            assignment, pred.queries.provenance)
    print(f"wrote PLY files to {args.out} (config {config_hash(config)})")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="anseg",
                                description="Retrieval-augmented part segmentation")
    p.add_argument("--config", help="JSON config file (sections: model, train, data, eval)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--categories")
    g.add_argument("--per-category", type=int, dest="per_category")
    g.add_argument("--novel-per-category", type=int, dest="novel_per_category")

    for name, help_ in (("pretrain", "within-scene stage-1 training"),
                        ("train", "cross-scene stage-2 training")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--mode", choices=MODES)
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", type=int, dest="batch_size")
        t.add_argument("--lr", type=float)
        t.add_argument("--train-points", type=int, dest="train_points")
        if name == "train":
            t.add_argument("--ckpt", required=True)
            t.add_argument("--repo", help="also save the memory repository here")

    f = sub.add_parser("fewshot", help="episodic few-shot evaluation")
    f.add_argument("--data", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--report", required=True)
    f.add_argument("--shots", type=int)
    f.add_argument("--episodes", type=int)
    f.add_argument("--adapt", choices=("none", "finetune"))

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="base-test",
                   choices=("base-train", "base-test", "novel-pool"))
    e.add_argument("--k", type=int, help="memories per forward pass")

    r = sub.add_parser("retrieve", help="rank repository scenes against a query")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--repo", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--topk", type=int, default=4)
    r.add_argument("--exclude-self", action="store_true", dest="exclude_self")

    z = sub.add_parser("viz", help="export colored PLY point clouds")
    z.add_argument("--ckpt", required=True)
    z.add_argument("--scene", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--repo")
    z.add_argument("--level", type=int, default=2)
    return p


FLAG_MAP = {
    "mode": ("model", "mode"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "train_points": ("train", "train_points"),
    "per_category": ("data", "per_category"),
    "novel_per_category": ("data", "novel_per_category"),
    "shots": ("eval", "shots"),
    "episodes": ("eval", "episodes"),
    "adapt": ("eval", "adapt"),
    "k": ("eval", "k"),
}

COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
    "fewshot": cmd_fewshot, "eval": cmd_eval, "retrieve": cmd_retrieve,
    "viz": cmd_viz,
}


def main(argv=None):
    threads = os.environ.get("ANSEG_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config = load_config(args.config)
        if getattr(args, "categories", None):
            config["data"]["categories"] = args.categories.split(",")
        apply_overrides(config, args, FLAG_MAP)
        config["train"].setdefault("seed", args.seed)
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
        COMMANDS[args.command](args, config)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        if getattr(args, "verbose", False):
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
