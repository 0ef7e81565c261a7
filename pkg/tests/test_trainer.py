import json

import pytest
import torch

from conftest import tiny_arch, tiny_config
from ocgan.data import ImageBatch, ImageRecord, SplitManifest, batch_iter
from ocgan.networks import ModelParams, init_params
from ocgan.synthetic import SyntheticSpec, generate_synthetic_dataset
from ocgan.trainer import (
    CHECKPOINT_VERSION,
    CheckpointError,
    OneClassViolation,
    init_state,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

NETWORKS = ModelParams.NETWORKS


def _batch(manifest: SplitManifest, n: int = 8) -> ImageBatch:
    return next(batch_iter(manifest.train[:n], n, image_size=16))


def _snapshot(params):
    return {name: {k: v.clone() for k, v in params.network(name).state_dict().items()} for name in NETWORKS}


def _changed(before, after, name):
    return {k for k, v in before[name].items() if v.is_floating_point() and not torch.equal(v, after[name][k])}


def _weights(params, name):
    return {k for k, v in params.network(name).named_parameters()}


class TestTrainStep:
    def test_all_networks_update(self, tiny_dataset):
        _, manifest = tiny_dataset
        state = init_state(tiny_config())
        before = _snapshot(state.params)
        losses = train_step(state, _batch(manifest))
        after = _snapshot(state.params)
        for name in NETWORKS:
            assert _weights(state.params, name) <= _changed(before, after, name), name
        assert state.step == 1
        assert losses.total == pytest.approx(
            20 * losses.recon + 4 * losses.adv_gen + 8 * losses.latent + losses.feature, rel=1e-6
        )

    @pytest.mark.parametrize(
        "variant,frozen",
        [("U", {"disc", "enc2"}), ("U+E", {"disc"}), ("U+D", {"enc2"}), ("U+D+E", set())],
    )
    def test_variant_isolation(self, tiny_dataset, variant, frozen):
        _, manifest = tiny_dataset
        state = init_state(tiny_config(variant=variant))
        before = _snapshot(state.params)
        losses = train_step(state, _batch(manifest))
        train_step(state, _batch(manifest))
        after = _snapshot(state.params)
        for name in NETWORKS:
            assert bool(_changed(before, after, name)) == (name not in frozen), name
        if "disc" in frozen:
            assert losses.adv_gen == 0.0 and losses.adv_disc == 0.0
        if "enc2" in frozen:
            assert losses.latent == 0.0 and losses.feature == 0.0

    def test_zero_learning_rate(self, tiny_dataset):
        _, manifest = tiny_dataset
        state = init_state(tiny_config(lr=0.0))
        before = {k: v.clone() for k, v in state.params.named_parameters()}
        train_step(state, _batch(manifest))
        for k, v in state.params.named_parameters():
            assert torch.equal(v, before[k]), k

    def test_separate_enc2_optimizer(self, tiny_dataset):
        _, manifest = tiny_dataset
        state = init_state(tiny_config(separate_enc2_optimizer=True))
        assert state.opt_e is not None
        before = _snapshot(state.params)
        train_step(state, _batch(manifest))
        assert _changed(before, _snapshot(state.params), "enc2")

    def test_rejects_abnormal_batch(self):
        state = init_state(tiny_config())
        batch = ImageBatch(torch.zeros(2, 1, 16, 16), torch.tensor([0, 1]))
        with pytest.raises(OneClassViolation):
            train_step(state, batch)


class TestTrain:
    def test_single_step_epoch(self, tmp_path):
        spec = SyntheticSpec(image_size=32, n_train_normal=64, n_test_normal=1, n_test_abnormal=1, seed=1)
        manifest = generate_synthetic_dataset(spec, tmp_path / "d")
        state, history = train(tiny_config(batch_size=64), manifest, run_dir=tmp_path / "run")
        assert len(history) == 1 and history[0].steps == 1 and state.step == 1
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 1
        assert (tmp_path / "run" / "ckpt_epoch1").exists()

    def test_one_class_guard(self, tiny_dataset):
        _, manifest = tiny_dataset
        poisoned = SplitManifest(train=[*manifest.train, ImageRecord(manifest.test[-1].path, 1, "x")])
        with pytest.raises(OneClassViolation, match="abnormal in train"):
            train(tiny_config(), poisoned)

    def test_empty_train(self):
        with pytest.raises(ValueError):
            train(tiny_config(), SplitManifest())

    def test_outputs_and_val_auc(self, tiny_dataset, tmp_path):
        _, manifest = tiny_dataset
        run = tmp_path / "run"
        state, history = train(tiny_config(epochs=3, keep_checkpoints=2), manifest, run_dir=run)
        assert [m.epoch for m in history] == [1, 2, 3]
        assert all(m.val_auc is not None and 0 <= m.val_auc <= 1 for m in history)
        assert state.best_val_auc == max(m.val_auc for m in history)
        assert json.loads((run / "config.json").read_text()) == tiny_config(epochs=3, keep_checkpoints=2).to_dict()
        assert sorted(p.name for p in run.glob("ckpt_epoch*")) == ["ckpt_epoch2", "ckpt_epoch3"]
        assert (run / "ckpt_best").exists()
        assert latest_checkpoint(run).name == "ckpt_epoch3"

    @pytest.mark.parametrize("dtype", ["float64", "float32"])
    def test_deterministic(self, tiny_dataset, tmp_path, dtype):
        _, manifest = tiny_dataset
        config = tiny_config(epochs=2, dtype=dtype)
        train(config, manifest, run_dir=tmp_path / "a")
        train(config, manifest, run_dir=tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_text()
        assert a == (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_seed_matters(self, tiny_dataset):
        _, manifest = tiny_dataset
        _, a = train(tiny_config(seed=0), manifest)
        _, b = train(tiny_config(seed=1), manifest)
        assert a[0].total != b[0].total

    def test_resume_matches_uninterrupted(self, tiny_dataset, tmp_path):
        _, manifest = tiny_dataset
        config = tiny_config(epochs=3, dtype="float64")
        full, full_hist = train(config, manifest, run_dir=tmp_path / "full")
        train(config, manifest, run_dir=tmp_path / "part", stop_after=1)
        resumed, resumed_hist = train(config, manifest, run_dir=tmp_path / "part",
                                      resume=tmp_path / "part" / "ckpt_epoch1")
        assert resumed_hist == full_hist
        assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()
        for (ka, va), (kb, vb) in zip(full.params.state_dict().items(), resumed.params.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_resume_config_mismatch(self, tiny_dataset, tmp_path):
        _, manifest = tiny_dataset
        train(tiny_config(), manifest, run_dir=tmp_path)
        with pytest.raises(ValueError):
            train(tiny_config(lr=1e-3), manifest, resume=tmp_path / "ckpt_epoch1")


class TestCheckpoint:
    def test_roundtrip_then_step(self, tiny_dataset, tmp_path):
        _, manifest = tiny_dataset
        state = init_state(tiny_config())
        train_step(state, _batch(manifest))
        save_checkpoint(state, tmp_path / "c")
        loaded = load_checkpoint(tmp_path / "c")
        assert loaded.step == state.step and loaded.config == state.config
        a = train_step(state, _batch(manifest))
        b = train_step(loaded, _batch(manifest))
        assert a == b
        for (ka, va), (kb, vb) in zip(state.params.state_dict().items(), loaded.params.state_dict().items()):
            assert torch.equal(va, vb), ka

    def test_resave_is_identical(self, tmp_path):
        state = init_state(tiny_config())
        save_checkpoint(state, tmp_path / "a")
        save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
        a = torch.load(tmp_path / "a", weights_only=True)
        b = torch.load(tmp_path / "b", weights_only=True)
        assert a.keys() == b.keys()
        for k, v in a["params"].items():
            assert torch.equal(v, b["params"][k])
        assert torch.equal(a["noise_rng"], b["noise_rng"])

    def test_fresh_checkpoint_equals_init(self, tmp_path):
        state = init_state(tiny_config(seed=5))
        save_checkpoint(state, tmp_path / "c")
        direct = init_params(tiny_arch(), seed=5)
        for (ka, va), (kb, vb) in zip(load_checkpoint(tmp_path / "c").params.state_dict().items(),
                                      direct.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(init_state(tiny_config()), tmp_path / "c")
        payload = torch.load(tmp_path / "c", weights_only=True)
        payload["version"] = CHECKPOINT_VERSION + 1
        torch.save(payload, tmp_path / "c")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "c")

    def test_corrupt(self, tmp_path):
        (tmp_path / "c").write_bytes(b"\x00garbage")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope")
        with pytest.raises(FileNotFoundError):
            latest_checkpoint(tmp_path)
