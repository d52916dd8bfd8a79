import numpy as np
import pytest

import main
from audio_dsp import AudioBuffer, read_wav, write_wav
from blockformer import ModelConfig
from conftest import SR, speech_like
from metrics import read_eval_rows
from mixgen import read_manifest
from training import initial_checkpoint, load_checkpoint, save_checkpoint

TINY_FLAGS = ["--win-len", "16", "--hop", "4", "--hidden", "3", "--d-model", "4",
              "--heads", "2", "--repeats", "1", "--d-ff", "8"]


@pytest.fixture
def identity_ckpt(tmp_path):
    path = tmp_path / "identity.ckpt"
    save_checkpoint(str(path), initial_checkpoint(ModelConfig(), seed=0, mask_bias=20.0))
    return path


def test_synth_is_reproducible(corpus, tmp_path, capsys):
    clean_dir, noise_dir = corpus
    outputs = []
    for name in ("a.tsv", "b.tsv"):
        out = tmp_path / name
        code = main.main(["--quiet", "synth", "--clean-dir", str(clean_dir), "--noise-dir", str(noise_dir),
                          "--out-manifest", str(out), "--snr-grid", "-10", "-5", "0", "5", "10"])
        assert code == main.EXIT_OK
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    assert "100 entries" in capsys.readouterr().out
    assert len(read_manifest(str(tmp_path / "a.tsv"))) == 100


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main.main(["synth", "--bogus"])
    assert exc.value.code == main.EXIT_USAGE


def test_train_without_manifest_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main.main(["train", "--steps", "1"])
    assert exc.value.code == main.EXIT_USAGE


@pytest.mark.parametrize("command", ["synth", "train", "enhance", "eval", "gradcheck"])
def test_help_exits_cleanly(command):
    with pytest.raises(SystemExit) as exc:
        main.main([command, "--help"])
    assert exc.value.code == 0


class TestEnhance:
    def test_saturated_mask_is_near_passthrough(self, identity_ckpt, tmp_path):
        noisy_path, out_a, out_b = tmp_path / "noisy.wav", tmp_path / "a.wav", tmp_path / "b.wav"
        write_wav(str(noisy_path), AudioBuffer(speech_like(SR, seed=8), SR))
        for out in (out_a, out_b):
            code = main.main(["--quiet", "enhance", "--ckpt", str(identity_ckpt),
                              "--in", str(noisy_path), "--out", str(out)])
            assert code == main.EXIT_OK

        noisy, enhanced = read_wav(str(noisy_path)), read_wav(str(out_a))
        assert len(enhanced) == len(noisy)
        assert np.max(np.abs(enhanced.samples - noisy.samples)) < 1e-3
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_three_seconds_at_default_config(self, identity_ckpt, tmp_path):
        noisy_path, out = tmp_path / "long.wav", tmp_path / "long_out.wav"
        write_wav(str(noisy_path), AudioBuffer(speech_like(3 * SR, seed=9), SR))
        code = main.main(["--quiet", "enhance", "--ckpt", str(identity_ckpt),
                          "--in", str(noisy_path), "--out", str(out)])
        assert code == main.EXIT_OK
        assert len(read_wav(str(out))) == 3 * SR

    def test_wrong_sample_rate(self, identity_ckpt, tmp_path, capsys):
        path = tmp_path / "8k.wav"
        write_wav(str(path), AudioBuffer(speech_like(8000, seed=1, sr=8000), 8000))
        code = main.main(["--quiet", "enhance", "--ckpt", str(identity_ckpt),
                          "--in", str(path), "--out", str(tmp_path / "o.wav")])
        assert code == main.EXIT_RUNTIME
        assert "16000" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        code = main.main(["--quiet", "enhance", "--ckpt", str(tmp_path / "none.ckpt"),
                          "--in", str(tmp_path / "x.wav"), "--out", str(tmp_path / "o.wav")])
        assert code == main.EXIT_RUNTIME

    def test_plot(self, identity_ckpt, tmp_path):
        noisy_path = tmp_path / "noisy.wav"
        write_wav(str(noisy_path), AudioBuffer(speech_like(SR // 2, seed=2), SR))
        code = main.main(["--quiet", "enhance", "--ckpt", str(identity_ckpt), "--in", str(noisy_path),
                          "--out", str(tmp_path / "o.wav"), "--plot", str(tmp_path / "cmp.png")])
        assert code == main.EXIT_OK
        assert (tmp_path / "cmp.png").stat().st_size > 0


class TestEval:
    def _args(self, manifest_path, tmp_path, *extra):
        return ["--quiet", "eval", "--manifest", str(manifest_path),
                "--out-rows", str(tmp_path / "rows.tsv"), "--out-summary", str(tmp_path / "summary.tsv"), *extra]

    def test_passthrough_with_svg(self, manifest_path, tmp_path):
        code = main.main(self._args(manifest_path, tmp_path, "--svg", str(tmp_path / "svg")))
        assert code == main.EXIT_OK

        rows = read_eval_rows(str(tmp_path / "rows.tsv"))
        test_entries = [e for e in read_manifest(str(manifest_path)) if e.split == "test"]
        assert len(rows) == len(test_entries)
        assert all(r.output_snr_db == r.input_snr_db for r in rows)

        svg = (tmp_path / "svg" / "snr_curves.svg").read_text(encoding="utf-8")
        assert svg.count("<polyline") == len({r.noise_tag for r in rows})
        assert (tmp_path / "svg" / "stoi_boxes.svg").exists()

    def test_missing_split(self, manifest_path, tmp_path):
        assert main.main(self._args(manifest_path, tmp_path, "--split", "dev")) == main.EXIT_RUNTIME

    def test_png_plots(self, manifest_path, tmp_path):
        code = main.main(self._args(manifest_path, tmp_path, "--split", "val", "--plots", str(tmp_path / "png")))
        assert code == main.EXIT_OK
        for name in ("snr_curves.png", "stoi_boxes.png", "snr_improvement.png"):
            assert (tmp_path / "png" / f"val_{name}").exists()


class TestGradcheck:
    def test_tiny_suite_passes(self, capsys):
        assert main.main(["--quiet", "gradcheck", "--config", "tiny"]) == main.EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out
        for name in ("linear", "gru_cell", "bgru", "multi_head_attention", "transformer_layer", "enhancer[tiny]"):
            assert name in out

    def test_corrupted_gradient_fails(self, capsys):
        assert main.main(["--quiet", "gradcheck", "--corrupt-gradient"]) == main.EXIT_RUNTIME
        assert "FAIL" in capsys.readouterr().out


def test_train_through_cli(manifest_path, tmp_path):
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "train.log"
    code = main.main(["--quiet", "train", "--manifest", str(manifest_path), "--out-ckpt", str(ckpt),
                      "--log", str(log), "--steps", "2", "--segment-len", "200", "--batch-size", "2",
                      "--checkpoint-every", "0", *TINY_FLAGS])
    assert code == main.EXIT_OK
    assert len(log.read_text(encoding="utf-8").splitlines()) == 2
    assert load_checkpoint(str(ckpt)).step == 2


@pytest.mark.slow
def test_toy_training_beats_passthrough(corpus, tmp_path):
    """小规模训练后，0 dB 测试集上的平均输出 SNR 高于输入 SNR"""
    clean_dir, noise_dir = corpus
    manifest, ckpt = tmp_path / "m.tsv", tmp_path / "toy.ckpt"
    assert main.main(["--quiet", "synth", "--clean-dir", str(clean_dir), "--noise-dir", str(noise_dir),
                      "--out-manifest", str(manifest), "--snr-grid", "0"]) == main.EXIT_OK
    assert main.main(["--quiet", "train", "--manifest", str(manifest), "--out-ckpt", str(ckpt),
                      "--steps", "400", "--segment-len", "8000", "--batch-size", "2", "--lr", "0.003",
                      "--checkpoint-every", "0", "--win-len", "64", "--hop", "16", "--hidden", "8",
                      "--d-model", "8", "--heads", "2", "--repeats", "1", "--d-ff", "16"]) == main.EXIT_OK
    assert main.main(["--quiet", "eval", "--ckpt", str(ckpt), "--manifest", str(manifest),
                      "--out-rows", str(tmp_path / "rows.tsv"), "--out-summary", str(tmp_path / "summary.tsv"),
                      "--svg", str(tmp_path / "svg")]) == main.EXIT_OK

    rows = read_eval_rows(str(tmp_path / "rows.tsv"))
    assert {r.noise_tag for r in rows} == {"babble", "hum"}
    assert np.mean([r.output_snr_db for r in rows]) > np.mean([r.input_snr_db for r in rows])
