"""Training loops: world building, role inference, schedules, resume."""

import dataclasses
import json
from types import SimpleNamespace

import numpy as np
import pytest

from brokenbind import config as C
from brokenbind import diffnet, synthgen, trainer
from brokenbind.errors import DataError
from brokenbind.linalg import NumericalFailure


def tiny_config(**train_overrides):
    train = {"epochs": 2, "pretrain_epochs": 1, "stage1_epochs": 0,
             "batch_size": 8, "eval_every": 0}
    train.update(train_overrides)
    return C.config_from_dict({
        "data": {"samples_per_dataset": 48, "test_samples": 24,
                 "raw_dims": [10, 9, 11], "latent_dim": 4},
        "encoder": {"hidden_dims": [12], "embed_dim": 8},
        "train": train,
    })


def tiny3_config(**train_overrides):
    train = {"epochs": 2, "pretrain_epochs": 1, "stage1_epochs": 0,
             "batch_size": 6, "eval_every": 0}
    train.update(train_overrides)
    return C.config_from_dict({
        "data": {"layout": "three_dataset", "samples_per_dataset": 24,
                 "test_samples": 12, "raw_dims": [10, 9, 11],
                 "latent_dim": 4},
        "encoder": {"hidden_dims": [12], "embed_dim": 8},
        "train": train,
    })


def train_pair(cfg):
    world = trainer.build_world(cfg)
    return trainer.make_datasets(world, cfg, "train")


def store_state(store):
    return (store.theta.copy(), store.adam_m.copy(), store.adam_v.copy(),
            store.opt_step)


def assert_same_state(a, b):
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert np.array_equal(a[2], b[2])
    assert a[3] == b[3]


def fake_ds(ds_id, observable, hidden=None):
    spec = synthgen.DatasetSpec(ds_id, 4, np.zeros(4), tuple(observable),
                                hidden)
    return SimpleNamespace(spec=spec)


class TestArmConfig:
    def test_full_arm_keeps_weights(self):
        cfg = tiny_config()
        assert trainer.arm_config(cfg, "full") == cfg

    def test_no_fro_zeroes_only_fro(self):
        w = trainer.arm_config(tiny_config(), "no_fro").train.weights
        assert w.w_fro == 0.0
        assert w.w_clip == 1.0 and w.w_sym == 1.0 and w.w_mox == 1.0

    def test_clip_only_zeroes_sym_and_mox(self):
        w = trainer.arm_config(tiny_config(), "clip_only").train.weights
        assert w.w_sym == 0.0 and w.w_mox == 0.0
        assert w.w_clip == 1.0

    def test_unknown_arm(self):
        with pytest.raises(ValueError, match="unknown arm"):
            trainer.arm_config(tiny_config(), "no_such_arm")

    def test_original_config_unchanged(self):
        cfg = tiny_config()
        trainer.arm_config(cfg, "clip_only")
        assert cfg.train.weights.w_sym == 1.0


class TestBuildWorld:
    def test_two_dataset_layout(self):
        world = trainer.build_world(tiny_config())
        (s1, s2) = world.dataset_specs
        assert s1.dataset_id == "d1" and s2.dataset_id == "d2"
        assert s1.observable == ("m_a", "m_b") and s1.hidden_target == "m_c"
        assert s2.observable == ("m_b", "m_c") and s2.hidden_target == "m_a"

    def test_three_dataset_layout(self):
        world = trainer.build_world(tiny3_config())
        (s1, s2, s3) = world.dataset_specs
        assert s1.observable == ("m_a",) and s1.hidden_target == "m_c"
        assert s2.observable == ("m_a", "m_b") and s2.hidden_target is None
        assert s3.observable == ("m_b", "m_c") and s3.hidden_target is None

    def test_split_sizes(self):
        cfg = tiny_config()
        world = trainer.build_world(cfg)
        assert all(s.num_samples == 48 for s in world.dataset_specs)
        assert all(s.num_samples == 24 for s in world.test_specs)

    def test_world_is_deterministic(self):
        cfg = tiny_config()
        w1, w2 = trainer.build_world(cfg), trainer.build_world(cfg)
        assert np.array_equal(w1.latent.class_centers, w2.latent.class_centers)
        for m in cfg.data.modalities:
            assert np.array_equal(w1.views[m].weight, w2.views[m].weight)

    def test_latent_shifts_have_configured_norm(self):
        cfg = tiny_config()
        world = trainer.build_world(cfg)
        want = cfg.data.shift_scale * cfg.data.within_class_std
        for spec in world.dataset_specs:
            assert np.linalg.norm(spec.latent_shift) == pytest.approx(want)
        s1, s2 = world.dataset_specs
        assert not np.allclose(s1.latent_shift, s2.latent_shift)

    def test_train_and_test_draws_differ(self):
        cfg = tiny_config()
        world = trainer.build_world(cfg)
        tr = trainer.make_datasets(world, cfg, "train")
        te = trainer.make_datasets(world, cfg, "test")
        assert tr[0].raw["m_a"].shape[0] == 48
        assert te[0].raw["m_a"].shape[0] == 24
        assert not np.array_equal(tr[0].latents[:24], te[0].latents)

    def test_make_datasets_reproducible(self):
        cfg = tiny_config()
        world = trainer.build_world(cfg)
        a = trainer.make_datasets(world, cfg, "train")
        b = trainer.make_datasets(world, cfg, "train")
        assert np.array_equal(a[1].raw["m_c"], b[1].raw["m_c"])
        assert np.array_equal(a[1].labels, b[1].labels)

    def test_bad_split_name(self):
        world = trainer.build_world(tiny_config())
        with pytest.raises(ValueError, match="split"):
            trainer.make_datasets(world, tiny_config(), "validation")


class TestEncoderSpecs:
    def test_dims_run_raw_to_embed(self):
        cfg = tiny_config()
        specs = trainer.encoder_specs(cfg)
        assert specs["m_a"].layer_dims == (10, 12, 8)
        assert specs["m_b"].layer_dims == (9, 12, 8)
        assert specs["m_c"].layer_dims == (11, 12, 8)

    def test_temperature_scales_applied(self):
        cfg = tiny_config()
        cfg = dataclasses.replace(
            cfg, encoder=dataclasses.replace(
                cfg.encoder, temperature_scales={"m_b": 2.5}))
        specs = trainer.encoder_specs(cfg)
        assert specs["m_b"].temperature_scale == 2.5
        assert specs["m_a"].temperature_scale == 1.0


class TestPhaseSchedule:
    def test_pretrain_zeroes_mox_weight(self):
        cfg = tiny_config(epochs=6, pretrain_epochs=2, stage1_epochs=1)
        weights, final_only = trainer.phase_schedule(0, cfg)
        assert weights.w_mox == 0.0
        assert weights.w_clip == 1.0 and weights.w_sym == 1.0
        assert final_only

    def test_boundaries(self):
        cfg = tiny_config(epochs=6, pretrain_epochs=2, stage1_epochs=1)
        w1, f1 = trainer.phase_schedule(1, cfg)
        assert w1.w_mox == 0.0 and not f1
        w2, f2 = trainer.phase_schedule(2, cfg)
        assert w2.w_mox == 1.0 and not f2

    def test_zero_pretrain_enables_mox_immediately(self):
        cfg = tiny_config(epochs=4, pretrain_epochs=0)
        weights, _ = trainer.phase_schedule(0, cfg)
        assert weights.w_mox == 1.0


class TestTwoDatasetRoles:
    def test_roles_from_generated_pair(self):
        d1, d2 = train_pair(tiny_config())
        roles = trainer.two_dataset_roles(d1, d2)
        assert roles.d1_id == "d1" and roles.d2_id == "d2"
        assert roles.pivot == "m_b"
        assert roles.solo1 == "m_a" and roles.solo2 == "m_c"

    def test_needs_two_observed_each(self):
        with pytest.raises(DataError, match="two observed modalities"):
            trainer.two_dataset_roles(fake_ds("d1", ["m_a"]),
                                      fake_ds("d2", ["m_b", "m_c"]))

    def test_no_shared_pivot(self):
        with pytest.raises(DataError, match="exactly one pivot"):
            trainer.two_dataset_roles(fake_ds("d1", ["m_a", "m_b"]),
                                      fake_ds("d2", ["m_c", "m_d"]))

    def test_two_shared_modalities(self):
        with pytest.raises(DataError, match="exactly one pivot"):
            trainer.two_dataset_roles(fake_ds("d1", ["m_a", "m_b"]),
                                      fake_ds("d2", ["m_a", "m_b"]))

    def test_hidden_target_must_match_layout(self):
        d1 = fake_ds("d1", ["m_a", "m_b"], hidden="m_x")
        d2 = fake_ds("d2", ["m_b", "m_c"])
        with pytest.raises(DataError, match="layout implies"):
            trainer.two_dataset_roles(d1, d2)


class TestChainRoles:
    def test_roles_from_generated_triple(self):
        cfg = tiny3_config()
        world = trainer.build_world(cfg)
        d1, d2, d3 = trainer.make_datasets(world, cfg, "train")
        roles = trainer.chain_roles(d1, d2, d3)
        assert roles.ids == ("d1", "d2", "d3")
        assert roles.pivot1 == "m_a" and roles.pivot2 == "m_b"
        assert roles.target == "m_c"

    def test_observed_count_pattern(self):
        with pytest.raises(DataError, match=r"\(1, 2, 2\)"):
            trainer.chain_roles(fake_ds("d1", ["m_a", "m_b"]),
                                fake_ds("d2", ["m_a", "m_b"]),
                                fake_ds("d3", ["m_b", "m_c"]))

    def test_second_dataset_must_observe_first_pivot(self):
        with pytest.raises(DataError, match="first pivot"):
            trainer.chain_roles(fake_ds("d1", ["m_a"]),
                                fake_ds("d2", ["m_b", "m_c"]),
                                fake_ds("d3", ["m_c", "m_d"]))

    def test_third_dataset_must_observe_second_pivot(self):
        with pytest.raises(DataError, match="second pivot"):
            trainer.chain_roles(fake_ds("d1", ["m_a"]),
                                fake_ds("d2", ["m_a", "m_b"]),
                                fake_ds("d3", ["m_c", "m_d"]))

    def test_hidden_target_must_end_the_chain(self):
        with pytest.raises(DataError, match="chain"):
            trainer.chain_roles(fake_ds("d1", ["m_a"], hidden="m_x"),
                                fake_ds("d2", ["m_a", "m_b"]),
                                fake_ds("d3", ["m_b", "m_c"]))


class TestTrainTwoDataset:
    def test_log_covers_every_epoch(self):
        cfg = tiny_config(epochs=3, pretrain_epochs=2)
        store, log = trainer.train(cfg, train_pair(cfg))
        assert [r["epoch"] for r in log] == [0, 1, 2]
        assert [r["phase"] for r in log] == ["pretrain", "pretrain", "mox"]
        assert all(np.isfinite(r["total"]) for r in log)

    def test_training_is_deterministic(self):
        cfg = tiny_config()
        data = train_pair(cfg)
        s1, log1 = trainer.train(cfg, data)
        s2, log2 = trainer.train(cfg, data)
        assert_same_state(store_state(s1), store_state(s2))
        assert log1 == log2

    def test_pretrain_phase_ignores_mox_only_weights(self):
        # while w_mox is forced to zero, arms differing only inside the
        # extrapolation group must produce bitwise-identical updates
        cfg = tiny_config(epochs=2, pretrain_epochs=2)
        data = train_pair(cfg)
        runs = {}
        for arm in ("full", "no_fro", "no_mox"):
            store, _ = trainer.train(trainer.arm_config(cfg, arm), data)
            runs[arm] = store_state(store)
        assert_same_state(runs["full"], runs["no_fro"])
        assert_same_state(runs["full"], runs["no_mox"])

    def test_arms_diverge_once_extrapolation_starts(self):
        cfg = tiny_config(epochs=2, pretrain_epochs=1)
        data = train_pair(cfg)
        full, _ = trainer.train(trainer.arm_config(cfg, "full"), data)
        bare, _ = trainer.train(trainer.arm_config(cfg, "no_fro"), data)
        assert not np.array_equal(full.theta, bare.theta)

    def test_stage1_freezes_early_layers(self):
        cfg = tiny_config(epochs=1, pretrain_epochs=1, stage1_epochs=1)
        specs = trainer.encoder_specs(cfg)
        init = diffnet.build_store(
            [specs[m] for m in cfg.data.modalities], cfg.seed)
        store, _ = trainer.train(cfg, train_pair(cfg))
        for name in store.names:
            same = np.array_equal(store.get(name), init.get(name))
            assert same == name.split("/")[1].startswith("layer0"), name

    def test_log_file_matches_memory(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "train.jsonl"
        _, log = trainer.train(cfg, train_pair(cfg), log_path=str(path))
        lines = path.read_text().splitlines()
        assert [json.loads(l) for l in lines] == log

    def test_eval_fn_merged_on_schedule(self):
        cfg = tiny_config(epochs=4, pretrain_epochs=0, eval_every=2)
        _, log = trainer.train(cfg, train_pair(cfg),
                               eval_fn=lambda store, epoch: {"probe": epoch})
        assert [r.get("probe") for r in log] == [None, 1, None, 3]

    def test_checkpoint_written_and_restorable(self, tmp_path):
        cfg = tiny_config(epochs=3, pretrain_epochs=0)
        path = tmp_path / "run.ckpt"
        store, _ = trainer.train(cfg, train_pair(cfg),
                                 checkpoint_path=str(path))
        fresh = diffnet.build_store(
            [trainer.encoder_specs(cfg)[m] for m in cfg.data.modalities],
            cfg.seed)
        meta = diffnet.restore_store(fresh, diffnet.load_checkpoint(str(path)))
        assert meta["epoch"] == [2.0]
        assert_same_state(store_state(fresh), store_state(store))

    def test_resume_after_interrupt_is_bitwise_identical(self, tmp_path):
        cfg = tiny_config(epochs=4, pretrain_epochs=2, eval_every=1)
        data = train_pair(cfg)
        ref, ref_log = trainer.train(cfg, data)

        def boom(store, epoch):
            if epoch == 1:
                raise RuntimeError("interrupted")
            return {}

        path = tmp_path / "resume.ckpt"
        with pytest.raises(RuntimeError, match="interrupted"):
            trainer.train(cfg, data, checkpoint_path=str(path), eval_fn=boom)
        store, log = trainer.train(cfg, data, checkpoint_path=str(path),
                                   resume=True)
        assert [r["epoch"] for r in log] == [1, 2, 3]
        assert_same_state(store_state(store), store_state(ref))
        assert log[-1]["total"] == ref_log[-1]["total"]

    def test_resume_of_finished_run_trains_nothing(self, tmp_path):
        cfg = tiny_config()
        data = train_pair(cfg)
        path = tmp_path / "done.ckpt"
        ref, _ = trainer.train(cfg, data, checkpoint_path=str(path))
        store, log = trainer.train(cfg, data, checkpoint_path=str(path),
                                   resume=True)
        assert log == []
        assert_same_state(store_state(store), store_state(ref))

    def test_wrong_dataset_count(self):
        cfg = tiny_config()
        with pytest.raises(DataError, match="expected 2 or 3"):
            trainer.train(cfg, train_pair(cfg)[:1])

    def test_raw_width_must_match_config(self):
        cfg = tiny_config()
        data = train_pair(cfg)
        wider = dataclasses.replace(
            cfg, data=dataclasses.replace(cfg.data, raw_dims=(10, 9, 12)))
        with pytest.raises(DataError, match="raw columns"):
            trainer.train(wider, data)

    def test_unknown_modality_rejected(self):
        cfg = tiny_config()
        data = train_pair(cfg)
        renamed = dataclasses.replace(
            cfg, data=dataclasses.replace(
                cfg.data, modalities=("m_a", "m_b", "m_z")))
        with pytest.raises(DataError, match="not one of the configured"):
            trainer.train(renamed, data)

    def test_nonfinite_loss_aborts_with_location(self):
        # a temperature this small overflows the scaled similarities on
        # the very first batch
        cfg = tiny_config(epochs=1, pretrain_epochs=0, tau=1e-320)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalFailure,
                               match="epoch 0, batch 0"):
                trainer.train(cfg, train_pair(cfg))

    def test_batch_size_must_fit(self):
        cfg = tiny_config(batch_size=200)
        with pytest.raises(DataError, match="no full batch"):
            trainer.train(cfg, train_pair(cfg))


class TestTrainThreeDataset:
    def test_two_stages_with_global_epochs(self):
        cfg = tiny3_config(epochs=2, pretrain_epochs=1)
        world = trainer.build_world(cfg)
        data = trainer.make_datasets(world, cfg, "train")
        store, log = trainer.train(cfg, data)
        assert [r["epoch"] for r in log] == [0, 1, 2, 3]
        assert [r["stage"] for r in log] == ["chain_a", "chain_a",
                                             "chain_b", "chain_b"]
        # the pretrain schedule restarts with each stage's local epochs
        assert [r["phase"] for r in log] == ["pretrain", "mox",
                                             "pretrain", "mox"]
        assert all(np.isfinite(r["total"]) for r in log)

    def test_deterministic(self):
        cfg = tiny3_config()
        world = trainer.build_world(cfg)
        data = trainer.make_datasets(world, cfg, "train")
        s1, _ = trainer.train(cfg, data)
        s2, _ = trainer.train(cfg, data)
        assert_same_state(store_state(s1), store_state(s2))

    def test_resume_lands_in_second_stage(self, tmp_path):
        cfg = tiny3_config(epochs=2, pretrain_epochs=1, eval_every=1)
        world = trainer.build_world(cfg)
        data = trainer.make_datasets(world, cfg, "train")
        ref, _ = trainer.train(cfg, data)

        def boom(store, epoch):
            if epoch == 2:
                raise RuntimeError("interrupted")
            return {}

        path = tmp_path / "chain.ckpt"
        with pytest.raises(RuntimeError, match="interrupted"):
            trainer.train(cfg, data, checkpoint_path=str(path), eval_fn=boom)
        store, log = trainer.train(cfg, data, checkpoint_path=str(path),
                                   resume=True)
        assert [(r["epoch"], r["stage"]) for r in log] == [
            (2, "chain_b"), (3, "chain_b")]
        assert_same_state(store_state(store), store_state(ref))
