import dataclasses

import numpy as np
import pytest
import torch

from anseg import train as T
from anseg.dataset import EpisodeSpec
from anseg.encoder import encoder_fingerprint
from anseg.losses import InvalidPairingError
from anseg.modulator import MODE_DETR3D
from anseg.retriever import FingerprintMismatchError, build_repository
from anseg.shapes import generate_scene

TINY = T.TrainConfig(channels=24, layers=2, heads=2, parametric_queries=8,
                     train_points=128, batch_size=2, epochs=1,
                     finetune_epochs=1)


@pytest.fixture(scope="module")
def scenes():
    return ([generate_scene("chair", s) for s in range(3)]
            + [generate_scene("mug", s) for s in range(3)])


@pytest.fixture(scope="module")
def model(scenes):
    m = T.build_model(TINY, semantic_vocab=T.semantic_vocabulary(scenes))
    return T.pretrain_within_scene(scenes, TINY, model=m, max_steps=2)


class TestConfig:
    def test_paper_hparams(self):
        cfg = T.TrainConfig().paper_hparams()
        assert cfg.epochs == 100
        assert cfg.finetune_epochs == 90
        assert cfg.lr == 2e-4 and cfg.batch_size == 16

    def test_paper_hparams_multi_memory(self):
        cfg = T.multi_memory_defaults(T.TrainConfig()).paper_hparams()
        assert cfg.memories_per_forward == 5
        assert cfg.lr == 1e-4 and cfg.batch_size == 8

    def test_finetune_defaults(self):
        cfg = T.TrainConfig()
        assert cfg.finetune_lr == 3e-5 and cfg.finetune_batch_size == 8

    def test_cosine_schedule_decays_to_floor(self, scenes):
        cfg = dataclasses.replace(TINY, lr=1e-3, lr_cosine_to=1e-5)
        model = T.build_model(cfg)
        opt = T._make_optimizer(model, cfg.lr, cfg.weight_decay)
        sched = T._make_scheduler(opt, cfg, scenes, max_steps=None)
        total = cfg.epochs * -(-len(T._examples(scenes)) // cfg.batch_size)
        for _ in range(total):
            opt.step()
            sched.step()
        assert opt.param_groups[0]["lr"] == pytest.approx(1e-5)

    def test_schedule_disabled_by_default(self, scenes):
        model = T.build_model(TINY)
        opt = T._make_optimizer(model, TINY.lr, TINY.weight_decay)
        assert T._make_scheduler(opt, TINY, scenes, None) is None


class TestSubsample:
    def test_keeps_every_finest_part(self, scenes):
        rng = np.random.default_rng(0)
        sub = T.subsample_scene(scenes[0], 64, rng)
        assert sub.num_points == 64
        for full_ann, sub_ann in zip(scenes[0].levels, sub.levels):
            assert set(np.unique(sub_ann.part_ids)) == set(np.unique(full_ann.part_ids))

    def test_noop_when_large_enough(self, scenes):
        assert T.subsample_scene(scenes[0], 10_000, np.random.default_rng(0)) \
            is scenes[0]


class TestAugment:
    def test_preserves_point_count_and_correspondence_scale(self, scenes):
        rng = np.random.default_rng(1)
        out = T.augment_points(scenes[0].points, rng)
        assert out.shape == scenes[0].points.shape
        assert not np.allclose(out, scenes[0].points)

    def test_rotation_only(self, scenes):
        rng = np.random.default_rng(2)
        out = T.augment_points(scenes[0].points, rng, deform=False)
        d_in = np.linalg.norm(scenes[0].points[0] - scenes[0].points[1])
        d_out = np.linalg.norm(out[0] - out[1])
        assert np.isclose(d_in, d_out, atol=1e-5)


class TestCheckpoint:
    def test_roundtrip_identical_predictions(self, model, scenes, tmp_path):
        path = tmp_path / "m.anck"
        T.save_checkpoint(model, TINY, path, stage="within-scene")
        again, cfg, meta = T.load_checkpoint(path)
        assert meta["stage"] == "within-scene"
        assert cfg == TINY
        p1 = model(scenes[0].points[:128], memories=[(scenes[1], 2)])
        p2 = again(scenes[0].points[:128], memories=[(scenes[1], 2)])
        assert torch.equal(p1.final.mask_logits, p2.final.mask_logits)

    def test_fingerprint_recorded(self, model, tmp_path):
        path = tmp_path / "m.anck"
        T.save_checkpoint(model, TINY, path)
        _, _, meta = T.load_checkpoint(path)
        assert meta["encoder_fingerprint"] == encoder_fingerprint(model.encoder)


class TestFreeze:
    def test_frozen_copy_is_independent(self, model):
        frozen = T.freeze_retriever_encoder(model)
        fp = encoder_fingerprint(frozen)
        with torch.no_grad():
            next(model.encoder.parameters()).add_(0.1)
        assert encoder_fingerprint(frozen) == fp
        assert encoder_fingerprint(model.encoder) != fp
        with torch.no_grad():
            next(model.encoder.parameters()).sub_(0.1)
        assert not any(p.requires_grad for p in frozen.parameters())


class TestCrossScene:
    def test_repo_fingerprint_gating(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        other = T.freeze_retriever_encoder(
            T.build_model(dataclasses.replace(TINY, seed=5)))
        repo = build_repository(scenes, other)
        with pytest.raises(FingerprintMismatchError):
            T.train_cross_scene(scenes, model, repo, TINY, frozen_encoder=frozen,
                                max_steps=1)

    def test_one_step_runs(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        repo = build_repository(scenes, frozen)
        before = [p.clone() for p in model.parameters()]
        T.train_cross_scene(scenes, model, repo, TINY, frozen_encoder=frozen,
                            max_steps=2)
        assert any(not torch.equal(a, b)
                   for a, b in zip(before, model.parameters()))

    def test_detr3d_needs_no_repo(self, scenes):
        cfg = dataclasses.replace(TINY, mode=MODE_DETR3D)
        m = T.build_model(cfg, semantic_vocab=T.semantic_vocabulary(scenes))
        T.train_cross_scene(scenes, m, None, cfg, max_steps=1)


class TestAdaptation:
    def test_memory_expansion_no_weight_updates(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        before = T.parameter_hash(model)
        repo = T.adapt_by_memory_expansion(frozen, scenes[:2])
        assert T.parameter_hash(model) == before
        assert len(repo) == 2 * 3
        with pytest.raises(ValueError):
            T.adapt_by_memory_expansion(frozen, [])

    def test_finetune_returns_new_model(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        tuned = T.finetune_fewshot(model, scenes[:2], TINY, frozen_encoder=frozen)
        assert tuned is not model
        assert T.parameter_hash(tuned) != T.parameter_hash(model)
        # original untouched
        assert any(torch.equal(a, b) for a, b in
                   zip(model.parameters(), model.parameters()))

    def test_k1_finetune_uses_self_memory(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        tuned = T.finetune_fewshot(model, scenes[:1], TINY, frozen_encoder=frozen)
        assert T.parameter_hash(tuned) != T.parameter_hash(model)


class TestEpisodes:
    def test_run_episodes_aggregates(self, model, scenes):
        frozen = T.freeze_retriever_encoder(model)
        by_id = {s.scene_id: s for s in scenes}
        eps = [EpisodeSpec("chair", 1, (scenes[0].scene_id,),
                           (scenes[1].scene_id,), e) for e in range(2)]
        rep = T.run_episodes(model, frozen, eps, by_id, TINY, adapt="none",
                             levels=(2,))
        assert rep.episode_mean is not None
        assert len(rep.episodes) == 2
        with pytest.raises(ValueError):
            T.run_episodes(model, frozen, eps, by_id, TINY, adapt="bogus")

    def test_no_episodes_rejected(self, model):
        with pytest.raises(ValueError):
            T.run_episodes(model, None, [], {}, TINY)


class TestDivergenceGuard:
    def test_non_finite_loss_aborts(self, scenes):
        cfg = dataclasses.replace(TINY, lr=1e10)  # blow up quickly
        m = T.build_model(cfg)
        with torch.no_grad():
            m.temperature.mul_(np.nan)
        with pytest.raises(T.DivergenceError):
            T.pretrain_within_scene(scenes[:2], cfg, model=m, max_steps=1)
