"""Labelled scene container, on-disk scene format, splits and episode sampling.

Scene files are JSON documents (format documented in docs/formats.md):
format_version, scene_id, category, num_points, points, and a `levels`
array of {level, part_ids, parts: [{id, semantic}]}. Coordinates are written
with enough digits to roundtrip IEEE-754 single precision bit-exactly.
"""

import dataclasses
import json
import os

import numpy as np

SCENE_FORMAT_VERSION = 1
UNANNOTATED = -1


class SceneFormatError(ValueError):
    """Malformed scene or manifest file."""


class SceneValidationError(ValueError):
    """Well-formed file whose content violates a scene invariant."""


class InsufficientDataError(ValueError):
    pass


@dataclasses.dataclass
class LevelAnnotation:
    level: int                 # 1 | 2 | 3
    part_ids: np.ndarray       # (N,) int64, -1 = unannotated
    semantics: dict            # part_id -> semantic label

    def num_parts(self):
        return len(self.semantics)


@dataclasses.dataclass
class LabeledScene:
    scene_id: str
    category: str
    points: np.ndarray         # (N, 3) float32
    levels: list               # [LevelAnnotation], ascending level

    @property
    def num_points(self):
        return len(self.points)

    def level(self, lvl: int) -> LevelAnnotation:
        for ann in self.levels:
            if ann.level == lvl:
                return ann
        raise KeyError(f"scene {self.scene_id} has no level {lvl}")

    def part_mask(self, lvl: int, part_id: int) -> np.ndarray:
        return self.level(lvl).part_ids == part_id

    def validate(self):
        """Check annotation invariants; raises SceneValidationError."""
        if self.num_points < 1 or not np.isfinite(self.points).all():
            raise SceneValidationError(f"{self.scene_id}: bad point array")
        for ann in self.levels:
            if len(ann.part_ids) != self.num_points:
                raise SceneValidationError(
                    f"{self.scene_id}: level {ann.level} part_ids length mismatch")
            present = sorted(set(int(p) for p in ann.part_ids if p != UNANNOTATED))
            ids = sorted(ann.semantics)
            if ids != list(range(len(ids))):
                raise SceneValidationError(
                    f"{self.scene_id}: level {ann.level} part ids not contiguous from 0")
            if not set(present) <= set(ids):
                raise SceneValidationError(
                    f"{self.scene_id}: level {ann.level} references undeclared part ids")
            if len(ids) < 1:
                raise SceneValidationError(f"{self.scene_id}: level {ann.level} has no parts")
        # refinement: each finer part maps into exactly one coarser part
        for coarse, fine in zip(self.levels, self.levels[1:]):
            annotated = (coarse.part_ids != UNANNOTATED) & (fine.part_ids != UNANNOTATED)
            for pid in fine.semantics:
                sel = annotated & (fine.part_ids == pid)
                parents = set(coarse.part_ids[sel].tolist())
                if len(parents) > 1:
                    raise SceneValidationError(
                        f"{self.scene_id}: level {fine.level} part {pid} spans "
                        f"{len(parents)} level-{coarse.level} parts")
        return self


@dataclasses.dataclass(frozen=True)
class EpisodeSpec:
    category: str
    k: int
    support_ids: tuple
    query_ids: tuple
    episode_seed: int

    def __post_init__(self):
        if len(self.support_ids) != self.k:
            raise ValueError("support set size must equal K")
        if set(self.support_ids) & set(self.query_ids):
            raise ValueError("support and query sets must be disjoint")


# ---------------------------------------------------------------------------
# scene file I/O


def _f32(x):
    # float(np.float32(x)) serializes as the shortest decimal that parses
    # back to the same float32 value
    return float(np.float32(x))


def write_scene(scene: LabeledScene, path):
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "category": scene.category,
        "num_points": scene.num_points,
        "points": [[_f32(v) for v in p] for p in scene.points],
        "levels": [
            {
                "level": ann.level,
                "part_ids": [int(p) for p in ann.part_ids],
                "parts": [{"id": int(pid), "semantic": sem}
                          for pid, sem in sorted(ann.semantics.items())],
            }
            for ann in scene.levels
        ],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def read_scene(path) -> LabeledScene:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: parse error at byte {e.pos}: {e.msg}") from e
    for field in ("format_version", "scene_id", "category", "num_points", "points", "levels"):
        if field not in doc:
            raise SceneFormatError(f"{path}: missing field {field!r}")
    if doc["format_version"] != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"{path}: unsupported format_version {doc['format_version']}")
    points = np.asarray(doc["points"], dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] != doc["num_points"]:
        raise SceneFormatError(f"{path}: field 'points' has bad shape {points.shape}")
    levels = []
    for entry in doc["levels"]:
        for field in ("level", "part_ids", "parts"):
            if field not in entry:
                raise SceneFormatError(f"{path}: level entry missing field {field!r}")
        levels.append(LevelAnnotation(
            level=int(entry["level"]),
            part_ids=np.asarray(entry["part_ids"], dtype=np.int64),
            semantics={int(p["id"]): p["semantic"] for p in entry["parts"]},
        ))
    levels.sort(key=lambda a: a.level)
    scene = LabeledScene(doc["scene_id"], doc["category"], points, levels)
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# splits and episodes


def build_splits(data_dir, base_categories, novel_categories, seed=0, train_ratio=0.8):
    """Assign every scene file in data_dir to base-train / base-test / novel-pool.

    Returns the manifest as a list of dicts, deterministic for a given seed.
    """
    files = sorted(f for f in os.listdir(data_dir) if f.endswith(".json")
                   and f != "manifest.json")
    if not files:
        raise InsufficientDataError(f"no scene files in {data_dir}")
    records = []
    for name in files:
        path = os.path.join(data_dir, name)
        scene = read_scene(path)
        records.append({"scene_id": scene.scene_id, "path": name,
                        "category": scene.category})
    rng = np.random.default_rng(seed)
    manifest = []
    by_cat = {}
    for rec in records:
        by_cat.setdefault(rec["category"], []).append(rec)
    for cat in sorted(by_cat):
        recs = by_cat[cat]
        if cat in novel_categories:
            for rec in recs:
                manifest.append({**rec, "split": "novel-pool"})
        elif cat in base_categories:
            order = rng.permutation(len(recs))
            n_train = int(round(train_ratio * len(recs)))
            for rank, i in enumerate(order):
                split = "base-train" if rank < n_train else "base-test"
                manifest.append({**recs[i], "split": split})
        else:
            raise SceneValidationError(f"category {cat!r} in neither base nor novel list")
    manifest.sort(key=lambda r: r["scene_id"])
    return manifest


def write_manifest(manifest, path):
    with open(path, "w") as f:
        json.dump({"format_version": 1, "scenes": manifest}, f, indent=1)
        f.write("\n")


def read_manifest(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: parse error at byte {e.pos}: {e.msg}") from e
    if "scenes" not in doc:
        raise SceneFormatError(f"{path}: missing field 'scenes'")
    for rec in doc["scenes"]:
        for field in ("scene_id", "path", "category", "split"):
            if field not in rec:
                raise SceneFormatError(f"{path}: manifest record missing {field!r}")
    return doc["scenes"]


def sample_episode(manifest, category, k, episode_seed) -> EpisodeSpec:
    """Draw a K-shot episode over the novel pool of one category."""
    pool = sorted(r["scene_id"] for r in manifest
                  if r["category"] == category and r["split"] == "novel-pool")
    if len(pool) < k + 1:
        raise InsufficientDataError(
            f"category {category!r} has {len(pool)} novel scenes, need >= {k + 1}")
    rng = np.random.default_rng(episode_seed)
    support = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
    support_ids = tuple(pool[i] for i in support)
    query_ids = tuple(s for s in pool if s not in support_ids)
    return EpisodeSpec(category=category, k=k, support_ids=support_ids,
                       query_ids=query_ids, episode_seed=episode_seed)
