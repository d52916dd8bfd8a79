import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from audio_dsp import AudioBuffer, write_wav
from blockformer import EnhancerModel, ModelConfig, forward
from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LEARNING_RATE
from conftest import SR, speech_like, white_noise
from metrics import snr_metric
from mixgen import DatasetSpec, build_manifest, read_manifest, synthesize_entry, write_manifest
from nn_core import AdamState, ParamSet, backward
from training import (
    BadMagicError,
    Batch,
    ChecksumError,
    CheckpointMismatchError,
    EmptySplitError,
    TrainConfig,
    TrainingError,
    initial_checkpoint,
    load_checkpoint,
    load_train_config,
    make_batch,
    model_from_checkpoint,
    save_checkpoint,
    snr_loss,
    train_loop,
    train_step,
)

TINY = ModelConfig(win_len=16, hop=4, hidden=3, d_model=4, heads=2, repeats=1, d_ff=8)


def tiny_train_config(manifest, tmp_path, **kwargs) -> TrainConfig:
    values = dict(
        manifest=str(manifest),
        model=TINY,
        segment_len=200,
        batch_size=2,
        steps=3,
        checkpoint_every=0,
        out_ckpt=str(tmp_path / "model.ckpt"),
        log_path=str(tmp_path / "train.log"),
    )
    values.update(kwargs)
    return TrainConfig(**values)


def one_pair_manifest(tmp_path, clean: np.ndarray, noise: np.ndarray) -> Path:
    """单个说话人、单个噪声、0 dB 的一条清单，全部划入 train"""
    clean_dir, noise_dir = tmp_path / "pair_clean", tmp_path / "pair_noise"
    (clean_dir / "spk00").mkdir(parents=True)
    noise_dir.mkdir()
    write_wav(str(clean_dir / "spk00" / "utt0.wav"), AudioBuffer(clean, SR))
    write_wav(str(noise_dir / "babble_01.wav"), AudioBuffer(noise, SR))
    spec = DatasetSpec(clean_dir=str(clean_dir), noise_dir=str(noise_dir), snr_grid=[0.0], splits=(1.0, 0.0, 0.0))
    path = tmp_path / "pair.tsv"
    write_manifest(str(path), build_manifest(spec), spec)
    return path


class TestSnrLoss:
    def test_zero_estimate_gives_zero_loss(self):
        clean = np.random.default_rng(0).standard_normal(500)
        assert snr_loss(clean, np.zeros(500)).item() == pytest.approx(0.0, abs=1e-6)

    def test_half_amplitude(self):
        clean = np.random.default_rng(1).standard_normal(500)
        assert snr_loss(clean, clean / 2).item() == pytest.approx(-10 * np.log10(4.0), abs=1e-6)

    def test_matches_negated_metric(self):
        rng = np.random.default_rng(2)
        clean = rng.standard_normal(1000)
        est = clean + rng.standard_normal(1000)
        metric = snr_metric(AudioBuffer(clean, SR), AudioBuffer(est, SR))
        assert -snr_loss(clean, est).item() == pytest.approx(metric, abs=1e-9)

    def test_floor_has_zero_gradient(self):
        clean = np.random.default_rng(3).standard_normal(100)
        p = ParamSet.from_arrays({"est": clean.copy()})
        loss = snr_loss(clean, p["est"], cap_db=60.0)
        assert loss.item() == -60.0
        backward(loss)
        assert_allclose(p["est"].grad, 0.0)

    def test_silent_reference(self):
        with pytest.raises(TrainingError):
            snr_loss(np.zeros(10), np.ones(10))


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(a), initial_checkpoint(TINY, seed=3))
        save_checkpoint(str(b), load_checkpoint(str(a)))
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_values(self, tmp_path):
        ckpt = initial_checkpoint(TINY, seed=4, mask_bias=20.0)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path, expected=TINY)
        assert back.config == TINY
        assert back.step == 0
        for name, tensor in ckpt.tensors.items():
            assert np.array_equal(back.tensors[name], tensor)
        assert_allclose(back.tensors["mask.b"], 20.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(BadMagicError):
            load_checkpoint(str(path))

    def test_corrupted_byte(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(str(path), initial_checkpoint(TINY))
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_checkpoint(str(path))

    def test_config_mismatch_names_tensor(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, initial_checkpoint(TINY))
        with pytest.raises(CheckpointMismatchError, match="bgru"):
            load_checkpoint(path, expected=replace(TINY, hidden=5))


class TestBatch:
    def test_segments_are_cropped_from_synthesized_pairs(self, manifest_path):
        entries = read_manifest(str(manifest_path))[:3]
        batch = make_batch(entries, 4000, seed=0)
        assert batch.noisy.shape == (3, 4000)
        assert_allclose(batch.noisy, batch.clean + batch.noise, atol=1e-12)

    def test_short_entries_are_zero_padded(self, manifest_path):
        entries = read_manifest(str(manifest_path))[:1]
        batch = make_batch(entries, SR + 500, seed=0)
        assert np.all(batch.clean[0, SR:] == 0.0)
        assert np.all(batch.noisy[0, SR:] == 0.0)

    def test_same_seed_same_batch(self, manifest_path):
        entries = read_manifest(str(manifest_path))[:2]
        a = make_batch(entries, 1000, seed=9)
        b = make_batch(entries, 1000, seed=9)
        assert np.array_equal(a.noisy, b.noisy)

    def test_silent_stretches_are_not_cropped(self, tmp_path, caplog):
        clean = np.zeros(2 * SR)
        clean[-100:] = speech_like(100, seed=3)
        entries = read_manifest(str(one_pair_manifest(tmp_path, clean, white_noise(SR, seed=4))))
        with caplog.at_level(logging.WARNING):
            for seed in range(5):
                batch = make_batch(entries, 400, seed=seed)
                assert np.any(batch.clean[0] != 0.0)
        for record in caplog.records:
            assert "entry 0" in record.getMessage()


class TestTrainStep:
    def _pair(self, manifest_path):
        entry = read_manifest(str(manifest_path))[0]
        mixture = synthesize_entry(entry)
        sl = slice(1000, 1400)
        return entry, mixture.mixture.samples[sl], mixture.clean.samples[sl], mixture.noise.samples[sl]

    def _batch(self, pair, copies: int) -> Batch:
        entry, noisy, clean, noise = pair
        return Batch(
            noisy=np.stack([noisy] * copies),
            clean=np.stack([clean] * copies),
            noise=np.stack([noise] * copies),
            entries=[entry] * copies,
        )

    def test_identical_pairs_match_single_pair(self, manifest_path):
        pair = self._pair(manifest_path)
        single = EnhancerModel.initialize(TINY, seed=7)
        repeated = EnhancerModel.initialize(TINY, seed=7)
        loss_one = train_step(single, self._batch(pair, 1), AdamState.for_params(single.params))
        loss_three = train_step(repeated, self._batch(pair, 3), AdamState.for_params(repeated.params))
        assert loss_three == pytest.approx(loss_one, rel=1e-12)
        for name, value in single.params.items():
            assert_allclose(repeated.params[name].data, value.data, atol=1e-9, err_msg=name)

    def test_parameters_move(self, manifest_path):
        model = EnhancerModel.initialize(TINY, seed=8)
        before = model.params.to_arrays()
        train_step(model, self._batch(self._pair(manifest_path), 2), AdamState.for_params(model.params))
        assert any(not np.array_equal(before[n], v.data) for n, v in model.params.items())


class TestTrainLoop:
    def test_log_has_one_line_per_step(self, manifest_path, tmp_path):
        cfg = tiny_train_config(manifest_path, tmp_path, steps=3)
        result = train_loop(cfg, progress=False)
        lines = (tmp_path / "train.log").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3
        assert [line.split("\t")[0] for line in lines] == ["1", "2", "3"]
        assert result.checkpoint.step == 3
        assert load_checkpoint(cfg.out_ckpt).step == 3

    def test_resume_reproduces_uninterrupted_run(self, manifest_path, tmp_path):
        full_dir, part_dir = tmp_path / "full", tmp_path / "part"
        full_dir.mkdir()
        part_dir.mkdir()
        full = train_loop(tiny_train_config(manifest_path, full_dir, steps=4, checkpoint_every=2), progress=False)
        periodic = full_dir / "model.step2.ckpt"
        assert periodic.exists()

        resumed = train_loop(tiny_train_config(manifest_path, part_dir, steps=4), resume=str(periodic), progress=False)
        assert resumed.losses == full.losses[2:]
        for name, tensor in full.checkpoint.tensors.items():
            assert np.array_equal(resumed.checkpoint.tensors[name], tensor), name
        assert (full_dir / "model.ckpt").read_bytes() == (part_dir / "model.ckpt").read_bytes()

    def test_empty_train_split(self, manifest_path, tmp_path):
        lines = manifest_path.read_text(encoding="utf-8").splitlines(keepends=True)
        kept = [l for l in lines if l.startswith("#") or "\ttest\t" in l]
        only_test = tmp_path / "test_only.tsv"
        only_test.write_text("".join(kept), encoding="utf-8")
        with pytest.raises(EmptySplitError):
            train_loop(tiny_train_config(only_test, tmp_path), progress=False)

    def test_yaml_config_with_overrides(self, tmp_path):
        path = tmp_path / "train.yaml"
        path.write_text(
            "manifest: m.tsv\nsteps: 10\nmodel:\n  win_len: 16\n  hop: 4\n  hidden: 3\n"
            "  d_model: 4\n  heads: 2\n  repeats: 1\n  d_ff: 8\noptimizer:\n  lr: 0.01\n",
            encoding="utf-8",
        )
        cfg = load_train_config(str(path), steps=5, seed=None)
        assert cfg.steps == 5
        assert cfg.lr == 0.01
        assert cfg.model == TINY

    def test_yaml_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("manifest: m.tsv\nlearning_rate: 0.1\n", encoding="utf-8")
        with pytest.raises(TrainingError, match="learning_rate"):
            load_train_config(str(path))


@pytest.mark.slow
def test_overfit_single_pair(tmp_path):
    """一对 (纯净, 噪声) 在 0 dB 混合，2 秒片段，默认模型和优化器训练 500 步后 SNR 至少提升 5 dB"""
    manifest = one_pair_manifest(tmp_path, speech_like(2 * SR + 4000, seed=0), white_noise(3 * SR, seed=1))
    cfg = TrainConfig(
        manifest=str(manifest), segment_len=2 * SR, batch_size=1, steps=500,
        checkpoint_every=0, out_ckpt=str(tmp_path / "overfit.ckpt"),
    )
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) == (LEARNING_RATE, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    result = train_loop(cfg, progress=False)
    assert result.losses[-1] < result.losses[0]

    mixture = synthesize_entry(read_manifest(str(manifest))[0])
    est, _ = forward(model_from_checkpoint(result.checkpoint), mixture.mixture)
    assert snr_metric(mixture.clean, est) >= snr_metric(mixture.clean, mixture.mixture) + 5.0
