"""Memory repository and cosine top-k retrieval.

One entry per (scene, level): a unit-norm global embedding plus per-part
pooled features, centroids, semantic labels and full-resolution masks, all
computed with a frozen encoder whose parameter fingerprint the repository
records. Retrieval is an exact linear scan.
"""

import dataclasses
import logging

import numpy as np
import torch

from .container import read_container, write_container
from .dataset import LabeledScene, LevelAnnotation
from .encoder import PointEncoder, encoder_fingerprint, global_embed, part_pool

logger = logging.getLogger(__name__)

REPO_MAGIC = b"ANRP"
REPO_VERSION = 1


class RetrievalEmptyError(LookupError):
    pass


class FingerprintMismatchError(ValueError):
    pass


@dataclasses.dataclass
class PartRecord:
    part_id: int
    feature: np.ndarray        # (C,)
    centroid: np.ndarray       # (3,)
    semantic_label: str
    mask: np.ndarray           # (Np,) bool


@dataclasses.dataclass
class MemoryEntry:
    scene_id: str
    level: int
    category: str
    embedding: np.ndarray      # (C,), unit norm
    parts: list                # [PartRecord]
    scene: LabeledScene        # source scene, used by the modulator

    @property
    def key(self):
        return (self.scene_id, self.level)


@dataclasses.dataclass
class MemoryRepository:
    fingerprint: str
    entries: list = dataclasses.field(default_factory=list)

    def __len__(self):
        return len(self.entries)


def encode_entry(scene: LabeledScene, level: int, frozen_encoder: PointEncoder) -> MemoryEntry:
    ann = scene.level(level)
    with torch.no_grad():
        feats = frozen_encoder(scene.points)
        emb = global_embed(feats).to(torch.float64).numpy()
        parts = []
        for pid in sorted(ann.semantics):
            mask = ann.part_ids == pid
            parts.append(PartRecord(
                part_id=pid,
                feature=part_pool(feats, mask, scene.points).to(torch.float64).numpy(),
                centroid=np.asarray(scene.points, dtype=np.float64)[mask].mean(axis=0),
                semantic_label=ann.semantics[pid],
                mask=mask,
            ))
    return MemoryEntry(scene.scene_id, level, scene.category, emb, parts, scene)


def build_repository(scenes, frozen_encoder: PointEncoder) -> MemoryRepository:
    """One entry per (scene, level). Scenes that fail to encode are skipped."""
    repo = MemoryRepository(fingerprint=encoder_fingerprint(frozen_encoder))
    skipped = 0
    for scene in scenes:
        for ann in scene.levels:
            try:
                repo.entries.append(encode_entry(scene, ann.level, frozen_encoder))
            except Exception as exc:  # noqa: BLE001 - degraded scene, keep going
                skipped += 1
                logger.warning("skipping %s level %d: %s", scene.scene_id, ann.level, exc)
    if skipped:
        logger.warning("repository build skipped %d entries", skipped)
    return repo


def add_memory(repo: MemoryRepository, scene: LabeledScene, level: int,
               frozen_encoder: PointEncoder) -> MemoryRepository:
    """Upsert one (scene, level) entry in place; returns the repository."""
    fp = encoder_fingerprint(frozen_encoder)
    if fp != repo.fingerprint:
        raise FingerprintMismatchError(
            "encoder fingerprint does not match the repository's")
    entry = encode_entry(scene, level, frozen_encoder)
    for i, existing in enumerate(repo.entries):
        if existing.key == entry.key:
            repo.entries[i] = entry
            return repo
    repo.entries.append(entry)
    return repo


def embed_cloud(points, frozen_encoder: PointEncoder) -> np.ndarray:
    with torch.no_grad():
        return global_embed(frozen_encoder(points)).to(torch.float64).numpy()


def retrieve_topk(repo: MemoryRepository, query, k: int, frozen_encoder=None,
                  exclude_scene_id=None, category_constraint=None,
                  level_constraint=None):
    """Top-k entries by cosine score, descending; ties keep insertion order.

    `query` is either a point cloud (then frozen_encoder is required) or a
    precomputed embedding vector. Returns [(entry, score)].
    """
    query = np.asarray(query)
    if query.ndim == 2:
        if frozen_encoder is None:
            raise ValueError("frozen_encoder required to embed a point cloud query")
        if encoder_fingerprint(frozen_encoder) != repo.fingerprint:
            raise FingerprintMismatchError(
                "query encoder differs from the one this repository was built with")
        query = embed_cloud(query, frozen_encoder)
    eligible = [
        e for e in repo.entries
        if (exclude_scene_id is None or e.scene_id != exclude_scene_id)
        and (category_constraint is None or e.category == category_constraint)
        and (level_constraint is None or e.level == level_constraint)
    ]
    if not eligible:
        raise RetrievalEmptyError("no memory entries satisfy the retrieval filters")
    scores = np.array([float(query @ e.embedding) for e in eligible])
    order = np.argsort(-scores, kind="stable")[: min(k, len(eligible))]
    return [(eligible[i], scores[i]) for i in order]


# ---------------------------------------------------------------------------
# serialization


def save_repository(repo: MemoryRepository, path):
    meta = {"fingerprint": repo.fingerprint, "entries": []}
    arrays = {}
    for i, e in enumerate(repo.entries):
        lvl = e.scene.level(e.level)
        meta["entries"].append({
            "scene_id": e.scene_id,
            "level": e.level,
            "category": e.category,
            "parts": [{"part_id": p.part_id, "semantic": p.semantic_label}
                      for p in e.parts],
        })
        arrays[f"e{i}.embedding"] = e.embedding
        arrays[f"e{i}.features"] = np.stack([p.feature for p in e.parts])
        arrays[f"e{i}.centroids"] = np.stack([p.centroid for p in e.parts])
        arrays[f"e{i}.points"] = e.scene.points
        arrays[f"e{i}.part_ids"] = lvl.part_ids
    write_container(path, REPO_MAGIC, REPO_VERSION, meta, arrays)


def load_repository(path) -> MemoryRepository:
    _, meta, arrays = read_container(path, REPO_MAGIC)
    repo = MemoryRepository(fingerprint=meta["fingerprint"])
    for i, ent in enumerate(meta["entries"]):
        part_ids = arrays[f"e{i}.part_ids"]
        semantics = {p["part_id"]: p["semantic"] for p in ent["parts"]}
        scene = LabeledScene(
            scene_id=ent["scene_id"], category=ent["category"],
            points=arrays[f"e{i}.points"],
            levels=[LevelAnnotation(level=ent["level"], part_ids=part_ids,
                                    semantics=semantics)],
        )
        parts = [
            PartRecord(
                part_id=p["part_id"],
                feature=arrays[f"e{i}.features"][j],
                centroid=arrays[f"e{i}.centroids"][j],
                semantic_label=p["semantic"],
                mask=part_ids == p["part_id"],
            )
            for j, p in enumerate(ent["parts"])
        ]
        repo.entries.append(MemoryEntry(
            ent["scene_id"], ent["level"], ent["category"],
            arrays[f"e{i}.embedding"], parts, scene))
    return repo
