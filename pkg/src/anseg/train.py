"""Two-stage training, few-shot adaptation and checkpointing.

Stage 1 (within-scene): the raw scene is the memory, an augmented copy is the
input, and memory query i is supervised to decode part i directly. Stage 2
(cross-scene): memories are sampled uniformly from the top-k retrieved by a
frozen copy of the stage-1 encoder, supervision is Hungarian-matched, and
within-scene batches are mixed in. Few-shot adaptation either expands the
memory with the support scenes (no weight updates) or fine-tunes on them.
"""

import copy
import dataclasses
import logging

import numpy as np
import torch

from . import geom
from .container import read_container, write_container
from .dataset import LabeledScene, LevelAnnotation
from .encoder import EncoderConfig, StageConfig, encoder_fingerprint
from .evaluation import (MetricReport, aggregate_episode_reports, ari,
                         assign_points, map_per_part, memory_query_decode_ratio,
                         miou, prediction_instances, propagate_labels)
from .losses import total_loss, within_scene_loss
from .modulator import (MODE_ANALOGICAL, MODE_DETR3D, ModulatorConfig,
                        SegmentationModel)
from .retriever import (FingerprintMismatchError, MemoryRepository,
                        RetrievalEmptyError, build_repository, retrieve_topk)

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"ANCK"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    mode: str = MODE_ANALOGICAL
    seg_mode: str = "softmax"
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 30
    weight_decay: float = 1e-4
    seed: int = 0
    memories_per_forward: int = 1
    topk_pool: int = 10
    within_every: int = 4          # every 4th cross-scene batch is within-scene
    level_constrained: bool = True
    train_points: int = 1024       # per-step point subsample (0 = full cloud)
    aug_rotate: bool = True
    aug_deform: bool = True
    grad_clip: float = 1.0
    lr_cosine_to: float = -1.0     # final lr of a cosine decay; < 0 disables
    dtype: str = "float32"
    channels: int = 96
    layers: int = 6
    heads: int = 4
    parametric_queries: int = 32
    finetune_lr: float = 3e-5
    finetune_batch_size: int = 8
    finetune_epochs: int = 30

    def paper_hparams(self):
        """Scale the desk defaults up to the published schedule."""
        return dataclasses.replace(
            self, epochs=100, finetune_epochs=90,
            **({"lr": 1e-4, "batch_size": 8}
               if self.memories_per_forward > 1 else {}))

    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def multi_memory_defaults(config: TrainConfig) -> TrainConfig:
    return dataclasses.replace(config, memories_per_forward=5, batch_size=8, lr=1e-4)


def build_model(config: TrainConfig, semantic_vocab=None) -> SegmentationModel:
    torch.manual_seed(config.seed)
    c = config.channels
    enc_cfg = EncoderConfig(channels=c, stages=(
        StageConfig(0.25, 0.25, 32, (64, 64, c)),
        StageConfig(0.5, 0.45, 32, (c, c, c)),
    ))
    mod_cfg = ModulatorConfig(
        layers=config.layers, heads=config.heads,
        parametric_queries=config.parametric_queries, mode=config.mode,
        memories_per_forward=config.memories_per_forward)
    model = SegmentationModel(enc_cfg, mod_cfg, semantic_vocab=semantic_vocab)
    return model.to(config.torch_dtype())


def semantic_vocabulary(scenes) -> list:
    vocab = set()
    for scene in scenes:
        for ann in scene.levels:
            vocab.update(ann.semantics.values())
    return sorted(vocab)


# ---------------------------------------------------------------------------
# data plumbing


def subsample_scene(scene: LabeledScene, n: int, rng) -> LabeledScene:
    """Random point subset that keeps at least 2 points in every finest part."""
    if n <= 0 or n >= scene.num_points:
        return scene
    finest = scene.levels[-1].part_ids
    keep = []
    for pid in np.unique(finest[finest >= 0]):
        members = np.flatnonzero(finest == pid)
        take = min(2, len(members))
        keep.extend(rng.choice(members, size=take, replace=False).tolist())
    keep = set(keep)
    rest = [i for i in range(scene.num_points) if i not in keep]
    extra = rng.choice(len(rest), size=max(0, n - len(keep)), replace=False)
    idx = np.sort(np.array(sorted(keep) + [rest[i] for i in extra]))
    return LabeledScene(
        scene_id=scene.scene_id, category=scene.category, points=scene.points[idx],
        levels=[LevelAnnotation(a.level, a.part_ids[idx], dict(a.semantics))
                for a in scene.levels])


def augment_points(points, rng, rotate=True, deform=True):
    pts = np.asarray(points, dtype=np.float64)
    if rotate:
        pts = geom.apply_rotation(pts, geom.sample_rotation(rng))
    if deform:
        pts = geom.deform(pts, geom.sample_deformation(pts, rng))
    return pts


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegmentationModel, config: TrainConfig, path,
                    stage="", frozen_encoder=None, extra_meta=None):
    """Persist model weights plus, if given, the frozen retrieval encoder.

    The retrieval encoder is frozen before cross-scene training while the
    model's own encoder keeps learning, so it must travel with the
    checkpoint for repositories and query embeddings to stay compatible.
    """
    meta = {
        **(extra_meta or {}),
        "config": dataclasses.asdict(config),
        "stage": stage,
        "seed": config.seed,
        "encoder_fingerprint": encoder_fingerprint(model.encoder),
        "frozen_fingerprint": (encoder_fingerprint(frozen_encoder)
                               if frozen_encoder is not None else ""),
        "semantic_vocab": model.semantic_vocab,
        "dtype": config.dtype,
    }
    arrays = {name: p.detach().cpu().numpy()
              for name, p in model.state_dict().items()}
    if frozen_encoder is not None:
        for name, p in frozen_encoder.state_dict().items():
            arrays[f"frozen::{name}"] = p.detach().cpu().numpy()
    write_container(path, CKPT_MAGIC, CKPT_VERSION, meta, arrays)


def load_checkpoint(path):
    """Returns (model, config, meta)."""
    _, meta, arrays = read_container(path, CKPT_MAGIC)
    config = TrainConfig(**meta["config"])
    model = build_model(config, semantic_vocab=meta["semantic_vocab"])
    state = {name: torch.as_tensor(arr) for name, arr in arrays.items()
             if not name.startswith("frozen::")}
    model.load_state_dict(state)
    return model, config, meta


def load_frozen_encoder(path):
    """The retrieval encoder stored alongside a checkpoint, or None."""
    _, meta, arrays = read_container(path, CKPT_MAGIC)
    state = {name[len("frozen::"):]: torch.as_tensor(arr)
             for name, arr in arrays.items() if name.startswith("frozen::")}
    if not state:
        return None
    config = TrainConfig(**meta["config"])
    frozen = freeze_retriever_encoder(build_model(config))
    frozen.load_state_dict(state)
    return frozen


def parameter_hash(model) -> str:
    return encoder_fingerprint(model)  # same byte-level hash, whole model


def freeze_retriever_encoder(model: SegmentationModel):
    """Detached copy of the encoder; its parameters never change thereafter."""
    frozen = copy.deepcopy(model.encoder)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    return frozen


# ---------------------------------------------------------------------------
# training stages


def _make_optimizer(model, lr, weight_decay):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def _make_scheduler(optimizer, config, scenes, max_steps):
    """Cosine lr decay over the planned step count; None when disabled."""
    if config.lr_cosine_to < 0:
        return None
    per_epoch = max(1, -(-len(_examples(scenes)) // config.batch_size))
    total = config.epochs * per_epoch
    if max_steps:
        total = min(total, max_steps)
    return torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=total, eta_min=config.lr_cosine_to)


def _check_finite(loss):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()!r}; aborting")


def _examples(scenes):
    return [(scene, ann.level) for scene in scenes for ann in scene.levels]


def _step(model, optimizer, batch_loss, grad_clip, scheduler=None):
    optimizer.zero_grad()
    _check_finite(batch_loss)
    batch_loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()


def within_scene_sample_loss(model, scene, level, rng, config):
    sub = subsample_scene(scene, config.train_points, rng)
    inp = augment_points(sub.points, rng, rotate=config.aug_rotate,
                         deform=config.aug_deform)
    pred = model(inp, memories=[(sub, level)])
    return within_scene_loss(pred, sub.level(level).part_ids,
                             seg_mode=config.seg_mode).total


def pretrain_within_scene(scenes, config: TrainConfig, model=None,
                          max_steps=None, callback=None) -> SegmentationModel:
    """Stage-1 training; returns the trained model."""
    if model is None:
        model = build_model(config)
    rng = np.random.default_rng(config.seed)
    optimizer = _make_optimizer(model, config.lr, config.weight_decay)
    scheduler = _make_scheduler(optimizer, config, scenes, max_steps)
    examples = _examples(scenes)
    steps = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            loss = sum(within_scene_sample_loss(model, s, lvl, rng, config)
                       for s, lvl in batch) / len(batch)
            _step(model, optimizer, loss, config.grad_clip, scheduler)
            steps += 1
            if callback:
                callback(epoch, steps, float(loss.detach()))
            if max_steps and steps >= max_steps:
                return model
        logger.info("within-scene epoch %d done (%d steps)", epoch, steps)
    return model


def _precompute_retrieval(scenes, repo, frozen_encoder, config):
    """Frozen retrieval is static: compute each example's top-k pool once."""
    from .retriever import embed_cloud
    pools = {}
    for scene in scenes:
        emb = embed_cloud(scene.points, frozen_encoder)
        for ann in scene.levels:
            try:
                ranked = retrieve_topk(
                    repo, emb, config.topk_pool,
                    exclude_scene_id=scene.scene_id,
                    level_constraint=ann.level if config.level_constrained else None)
            except RetrievalEmptyError:
                ranked = []
            pools[(scene.scene_id, ann.level)] = [e for e, _ in ranked]
    return pools


def cross_scene_sample_loss(model, scene, level, memories, rng, config):
    sub = subsample_scene(scene, config.train_points, rng)
    inp = augment_points(sub.points, rng, rotate=config.aug_rotate, deform=False)
    mems = [(subsample_scene(m.scene, config.train_points, rng), m.level)
            for m in memories]
    pred = model(inp, memories=mems, level=level)
    return total_loss(
        pred, sub.level(level).part_ids, config.mode,
        semantics=sub.level(level).semantics,
        semantic_head=model.semantic_head,
        vocab_index={s: i for i, s in enumerate(model.semantic_vocab)}
        if model.semantic_vocab else None,
        seg_mode=config.seg_mode).total


def train_cross_scene(scenes, model: SegmentationModel, repo, config: TrainConfig,
                      frozen_encoder=None, max_steps=None, callback=None):
    """Stage-2 training with retrieved memories (or none in detr3d mode)."""
    rng = np.random.default_rng(config.seed + 1)
    optimizer = _make_optimizer(model, config.lr, config.weight_decay)
    scheduler = _make_scheduler(optimizer, config, scenes, max_steps)
    examples = _examples(scenes)
    use_memory = config.mode != MODE_DETR3D
    pools = {}
    if use_memory:
        if repo is None or frozen_encoder is None:
            raise ValueError(f"{config.mode} mode needs a repository and frozen encoder")
        if encoder_fingerprint(frozen_encoder) != repo.fingerprint:
            raise FingerprintMismatchError(
                "repository was built with a different frozen encoder")
        pools = _precompute_retrieval(scenes, repo, frozen_encoder, config)
    steps = 0
    skipped = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            terms = []
            within = use_memory and config.within_every and bi % config.within_every == 0
            for scene, level in batch:
                if not use_memory:
                    terms.append(cross_scene_sample_loss(
                        model, scene, level, [], rng, config))
                elif within:
                    terms.append(within_scene_sample_loss(
                        model, scene, level, rng, config))
                else:
                    pool = pools.get((scene.scene_id, level), [])
                    if not pool:
                        skipped += 1
                        continue
                    take = min(config.memories_per_forward, len(pool))
                    picks = rng.choice(len(pool), size=take, replace=False)
                    terms.append(cross_scene_sample_loss(
                        model, scene, level, [pool[i] for i in picks], rng, config))
            if not terms:
                continue
            loss = sum(terms) / len(terms)
            _step(model, optimizer, loss, config.grad_clip, scheduler)
            steps += 1
            if callback:
                callback(epoch, steps, float(loss.detach()))
            if max_steps and steps >= max_steps:
                return model
        logger.info("cross-scene epoch %d done (%d steps)", epoch, steps)
    if skipped:
        logger.warning("skipped %d samples with empty retrieval pools", skipped)
    return model


# ---------------------------------------------------------------------------
# few-shot adaptation


def adapt_by_memory_expansion(frozen_encoder, support_scenes) -> MemoryRepository:
    """Fresh repository holding only the support exemplars; no weight updates."""
    if not support_scenes:
        raise ValueError("support set is empty")
    return build_repository(support_scenes, frozen_encoder)


def finetune_fewshot(model: SegmentationModel, support_scenes, config: TrainConfig,
                     frozen_encoder=None):
    """Fine-tune on the K support scenes.

    K > 1: cross-scene style with memories drawn from the other supports.
    K = 1: within-scene style, the single support is its own (raw) memory.
    """
    model = copy.deepcopy(model)
    ft = dataclasses.replace(config, lr=config.finetune_lr,
                             batch_size=config.finetune_batch_size,
                             epochs=config.finetune_epochs)
    rng = np.random.default_rng(config.seed + 2)
    optimizer = _make_optimizer(model, ft.lr, ft.weight_decay)
    examples = _examples(support_scenes)
    use_memory = config.mode != MODE_DETR3D
    for _epoch in range(ft.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), ft.batch_size):
            batch = [examples[i] for i in order[start:start + ft.batch_size]]
            terms = []
            for scene, level in batch:
                if not use_memory:
                    terms.append(cross_scene_sample_loss(model, scene, level, [], rng, ft))
                    continue
                others = [s for s in support_scenes if s.scene_id != scene.scene_id]
                if others:
                    mem = others[rng.integers(len(others))]
                    sub_mem = subsample_scene(mem, ft.train_points, rng)
                    sub = subsample_scene(scene, ft.train_points, rng)
                    inp = augment_points(sub.points, rng, rotate=config.aug_rotate, deform=False)
                    pred = model(inp, memories=[(sub_mem, level)], level=level)
                    terms.append(total_loss(pred, sub.level(level).part_ids,
                                            ft.mode, seg_mode=ft.seg_mode).total)
                else:
                    terms.append(within_scene_sample_loss(model, scene, level, rng, ft))
            loss = sum(terms) / len(terms)
            _step(model, optimizer, loss, ft.grad_clip)
    return model


# ---------------------------------------------------------------------------
# evaluation drivers


def evaluate_scene(model, scene, level, repo=None, frozen_encoder=None,
                   memories_per_forward=1):
    """Segment one scene at one granularity; returns a per-scene record."""
    ann = scene.level(level)
    use_memory = model.config.mode != MODE_DETR3D
    mems = []
    if use_memory:
        ranked = retrieve_topk(repo, scene.points, memories_per_forward,
                               frozen_encoder=frozen_encoder,
                               exclude_scene_id=scene.scene_id,
                               level_constraint=level)
        mems = [(e.scene, e.level) for e, _ in ranked]
    with torch.no_grad():
        pred = model(scene.points, memories=mems, level=level)
    assignment = assign_points(pred)
    gt_ids = ann.part_ids
    record = {
        "scene_id": scene.scene_id,
        "category": scene.category,
        "level": level,
        "ari": ari(assignment, gt_ids),
        "assignment": assignment,
        "provenance": pred.queries.provenance,
        "part_ids": gt_ids,
    }
    gt_sem = [ann.semantics.get(int(p), "__unannotated__") for p in gt_ids]
    if use_memory:
        pred_sem = propagate_labels(assignment, pred.queries.provenance)
    else:
        pred_sem = _detr3d_semantics(model, pred, assignment)
    keep = np.asarray(gt_ids) >= 0
    record["miou"] = miou(np.asarray(pred_sem, dtype=object)[keep],
                          np.asarray(gt_sem, dtype=object)[keep])
    instances = prediction_instances(pred, assignment)
    if not use_memory:
        conf = pred.final.confidences.detach().to(torch.float64).numpy()
        instances = [((assignment == q), float(conf[q]),
                      _detr3d_query_label(model, pred, q))
                     for q in np.unique(assignment)]
    gt_instances = [(np.asarray(gt_ids) == pid, sem)
                    for pid, sem in ann.semantics.items()]
    record["map"] = map_per_part(instances, gt_instances)
    return record


def _detr3d_query_label(model, pred, q):
    if model.semantic_head is None:
        return "unlabeled"
    with torch.no_grad():
        logits = model.semantic_head(pred.queries.features[int(q)])
    return model.semantic_vocab[int(logits.argmax())]


def _detr3d_semantics(model, pred, assignment):
    labels = {int(q): _detr3d_query_label(model, pred, q)
              for q in np.unique(assignment)}
    return [labels[int(q)] for q in assignment]


def evaluate_scenes(model, scenes, levels=(1, 2, 3), repo=None,
                    frozen_encoder=None, memories_per_forward=1) -> MetricReport:
    records = []
    for scene in scenes:
        for level in levels:
            records.append(evaluate_scene(
                model, scene, level, repo=repo, frozen_encoder=frozen_encoder,
                memories_per_forward=memories_per_forward))
    per_cat = {}
    for r in records:
        per_cat.setdefault(r["category"], []).append(r["ari"])
    ratio = memory_query_decode_ratio(
        (r["assignment"], r["provenance"], r["part_ids"]) for r in records)
    return MetricReport(
        ari_x100=100.0 * float(np.mean([r["ari"] for r in records])),
        miou_percent=float(np.mean([r["miou"] for r in records])),
        map_percent=float(np.mean([r["map"] for r in records])),
        memory_query_decode_ratio=ratio,
        per_category={c: 100.0 * float(np.mean(v)) for c, v in per_cat.items()},
    )


def run_episodes(model, frozen_encoder, episodes, scenes_by_id, config,
                 adapt="none", levels=(1, 2, 3)) -> MetricReport:
    """Evaluate K-shot episodes; adapt = "none" (memory expansion) or "finetune"."""
    if not episodes:
        raise ValueError("need at least one episode")
    reports = []
    for ep in episodes:
        support = [scenes_by_id[s] for s in ep.support_ids]
        query = [scenes_by_id[s] for s in ep.query_ids]
        ep_model = model
        if adapt == "finetune":
            ep_model = finetune_fewshot(model, support, config,
                                        frozen_encoder=frozen_encoder)
        elif adapt != "none":
            raise ValueError(f"unknown adaptation mode {adapt!r}")
        repo = None
        if config.mode != MODE_DETR3D:
            repo = adapt_by_memory_expansion(frozen_encoder, support)
        reports.append(evaluate_scenes(
            ep_model, query, levels=levels, repo=repo,
            frozen_encoder=frozen_encoder,
            memories_per_forward=config.memories_per_forward))
    return aggregate_episode_reports(reports)
