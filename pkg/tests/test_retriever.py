import numpy as np
import pytest
import torch

from anseg.encoder import encoder_fingerprint
from anseg.retriever import (FingerprintMismatchError, RetrievalEmptyError,
                             add_memory, build_repository, embed_cloud,
                             load_repository, retrieve_topk, save_repository)
from anseg.shapes import generate_scene
from anseg.train import TrainConfig, build_model, freeze_retriever_encoder


@pytest.fixture(scope="module")
def frozen():
    model = build_model(TrainConfig(channels=24, layers=2, heads=2,
                                    parametric_queries=4))
    return freeze_retriever_encoder(model)


@pytest.fixture(scope="module")
def scenes():
    return ([generate_scene("chair", s) for s in range(3)]
            + [generate_scene("mug", s) for s in range(3)])


@pytest.fixture(scope="module")
def repo(frozen, scenes):
    return build_repository(scenes, frozen)


class TestBuild:
    def test_entry_per_scene_and_level(self, repo, scenes):
        assert len(repo) == len(scenes) * 3
        assert repo.fingerprint != ""

    def test_embeddings_unit_norm(self, repo):
        for e in repo.entries:
            assert np.isclose(np.linalg.norm(e.embedding), 1.0)

    def test_part_records_complete(self, repo, scenes):
        by_key = {(e.scene_id, e.level): e for e in repo.entries}
        s = scenes[0]
        for ann in s.levels:
            e = by_key[(s.scene_id, ann.level)]
            assert len(e.parts) == ann.num_parts()
            assert {p.semantic_label for p in e.parts} == set(ann.semantics.values())

    def test_add_memory_fingerprint_check(self, repo, frozen, scenes):
        other = build_model(TrainConfig(channels=24, layers=2, heads=2,
                                        parametric_queries=4, seed=99))
        wrong = freeze_retriever_encoder(other)
        assert encoder_fingerprint(wrong) != repo.fingerprint
        with pytest.raises(FingerprintMismatchError):
            add_memory(repo, scenes[0], 1, wrong)

    def test_add_memory_upserts(self, repo, frozen, scenes):
        n = len(repo)
        add_memory(repo, scenes[0], 1, frozen)  # same key: replaces
        assert len(repo) == n


class TestRetrieve:
    def test_self_retrieval_score_one(self, repo, frozen, scenes):
        ranked = retrieve_topk(repo, scenes[0].points, 1, frozen_encoder=frozen,
                               level_constraint=1)
        entry, score = ranked[0]
        assert entry.scene_id == scenes[0].scene_id
        assert abs(score - 1.0) < 1e-6

    def test_scores_nonincreasing(self, repo, frozen, scenes):
        ranked = retrieve_topk(repo, scenes[1].points, 10, frozen_encoder=frozen)
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)

    def test_category_constraint_sound(self, repo, frozen, scenes):
        ranked = retrieve_topk(repo, scenes[0].points, 50, frozen_encoder=frozen,
                               category_constraint="mug")
        assert ranked and all(e.category == "mug" for e, _ in ranked)

    def test_exclude_self(self, repo, frozen, scenes):
        ranked = retrieve_topk(repo, scenes[0].points, 50, frozen_encoder=frozen,
                               exclude_scene_id=scenes[0].scene_id)
        assert all(e.scene_id != scenes[0].scene_id for e, _ in ranked)

    def test_empty_result_raises(self, repo, frozen, scenes):
        with pytest.raises(RetrievalEmptyError):
            retrieve_topk(repo, scenes[0].points, 5, frozen_encoder=frozen,
                          category_constraint="spaceship")

    def test_topk_larger_than_repo_returns_all(self, repo, frozen, scenes):
        ranked = retrieve_topk(repo, scenes[0].points, 10_000,
                               frozen_encoder=frozen)
        assert len(ranked) == len(repo)

    def test_embedding_query_equals_cloud_query(self, repo, frozen, scenes):
        emb = embed_cloud(scenes[2].points, frozen)
        r1 = retrieve_topk(repo, scenes[2].points, 3, frozen_encoder=frozen)
        r2 = retrieve_topk(repo, emb, 3)
        assert [(e.key, s) for e, s in r1] == [(e.key, s) for e, s in r2]


class TestSerialization:
    def test_roundtrip_bit_identical(self, repo, tmp_path):
        p1, p2 = tmp_path / "a.anrp", tmp_path / "b.anrp"
        save_repository(repo, p1)
        again = load_repository(p1)
        save_repository(again, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert again.fingerprint == repo.fingerprint
        assert len(again) == len(repo)

    def test_rebuild_bit_identical(self, frozen, scenes, tmp_path):
        p1, p2 = tmp_path / "a.anrp", tmp_path / "b.anrp"
        save_repository(build_repository(scenes, frozen), p1)
        save_repository(build_repository(scenes, frozen), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_repo_retrieves_identically(self, repo, frozen, scenes, tmp_path):
        p = tmp_path / "r.anrp"
        save_repository(repo, p)
        again = load_repository(p)
        r1 = retrieve_topk(repo, scenes[4].points, 5, frozen_encoder=frozen)
        r2 = retrieve_topk(again, scenes[4].points, 5, frozen_encoder=frozen)
        assert [(e.key, s) for e, s in r1] == [(e.key, s) for e, s in r2]
