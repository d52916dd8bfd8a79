import numpy as np
import pytest
from numpy.testing import assert_allclose

import gradcheck_suite
from audio_dsp import AudioBuffer, stft
from blockformer import (
    EnhancerModel,
    ModelConfig,
    ModelConfigError,
    ModelInputError,
    blockformer_block,
    forward,
    mask_head,
)
from conftest import SR, speech_like
from gradcheck_suite import TINY_CONFIG, TINY_INPUT_LEN
from nn_core import (
    ParamSet,
    constant,
    init_linear_params,
    init_transformer_params,
    positional_encoding,
    transformer_layer,
)

SMALL = ModelConfig(win_len=64, hop=16, hidden=4, d_model=8, heads=2, repeats=1, d_ff=16)


class TestModelConfig:
    def test_text_round_trip(self):
        assert ModelConfig.from_text(SMALL.to_text()) == SMALL

    def test_heads_must_divide(self):
        with pytest.raises(ModelConfigError):
            ModelConfig(d_model=30, heads=4).validate()

    def test_positive_fields(self):
        with pytest.raises(ModelConfigError):
            ModelConfig(hidden=0).validate()

    def test_parameter_layout(self):
        shapes = EnhancerModel.param_shapes(SMALL)
        assert shapes["bgru.fwd.W_z"] == (33, 4)
        assert shapes["embed.W"] == (1 + 2 * 4, 8)
        assert shapes["blocks.0.intra.attn.W_Q"] == (8, 8)
        assert shapes["blocks.0.inter.ffn.W1"] == (8, 16)
        assert shapes["mask.W"] == (8, 1)
        model = EnhancerModel.initialize(SMALL, seed=0)
        assert model.num_parameters() == sum(int(np.prod(s)) for s in shapes.values())

    def test_shapes_match_initialized_parameters(self):
        for config in (SMALL, TINY_CONFIG, ModelConfig()):
            model = EnhancerModel.initialize(config, seed=5)
            initialized = {name: value.shape for name, value in model.params.items()}
            assert EnhancerModel.param_shapes(config) == dict(sorted(initialized.items()))


class TestForward:
    def test_output_shapes(self):
        model = EnhancerModel.initialize(SMALL, seed=1)
        noisy = AudioBuffer(speech_like(1000, seed=1), SR)
        est, mask = forward(model, noisy)
        assert len(est) == len(noisy)
        assert est.sample_rate == SR
        assert mask.values.shape == (1000 // 16 + 1, 33)
        assert np.all((mask.values > 0.0) & (mask.values < 1.0))

    def test_deterministic(self):
        model = EnhancerModel.initialize(SMALL, seed=2)
        noisy = AudioBuffer(speech_like(800, seed=2), SR)
        a, _ = forward(model, noisy)
        b, _ = forward(model, noisy)
        assert np.array_equal(a.samples, b.samples)

    def test_unit_mask_reconstructs_input(self):
        model = EnhancerModel.initialize(SMALL, seed=3)
        noisy = AudioBuffer(speech_like(900, seed=3), SR)
        est, _ = forward(model, noisy, mask_override=np.ones(1))
        assert_allclose(est.samples, noisy.samples, atol=1e-10)

    def test_zero_mask_gives_silence(self):
        model = EnhancerModel.initialize(SMALL, seed=3)
        est, _ = forward(model, AudioBuffer(speech_like(900, seed=3), SR), mask_override=np.zeros(1))
        assert_allclose(est.samples, 0.0, atol=1e-15)

    def test_saturated_mask_bias_is_near_identity(self):
        model = EnhancerModel.initialize(ModelConfig(), seed=0)
        model.set_mask_bias(20.0)
        noisy = AudioBuffer(speech_like(4000, seed=4), SR)
        est, _ = forward(model, noisy)
        rel = np.linalg.norm(est.samples - noisy.samples) / np.linalg.norm(noisy.samples)
        assert rel < 1e-3

    @pytest.mark.parametrize("seconds", [1.0, 1.7, 3.0])
    def test_default_config_lengths(self, seconds):
        model = EnhancerModel.initialize(ModelConfig(), seed=0)
        model.set_mask_bias(20.0)
        n = int(seconds * SR)
        noisy = AudioBuffer(speech_like(n, seed=6), SR)
        est, mask = forward(model, noisy)
        assert len(est) == n
        assert mask.values.shape == (n // 128 + 1, 257)
        rel = np.linalg.norm(est.samples - noisy.samples) / np.linalg.norm(noisy.samples)
        assert rel < 1e-3

    def test_sample_rate_mismatch(self):
        model = EnhancerModel.initialize(SMALL, seed=0)
        with pytest.raises(ModelInputError, match="16000 Hz"):
            forward(model, AudioBuffer(np.ones(400), 8000))

    def test_wrong_parameter_shape(self):
        model = EnhancerModel.initialize(SMALL, seed=0)
        arrays = model.params.to_arrays()
        arrays["mask.W"] = np.zeros((3, 1))
        with pytest.raises(ModelConfigError, match="mask.W"):
            EnhancerModel(SMALL, ParamSet.from_arrays(arrays))


def _zeroed(arrays):
    return ParamSet.from_arrays({k: np.zeros_like(v) for k, v in arrays.items()})


class TestBlocks:
    def test_zero_weight_block_is_identity(self):
        rng = np.random.default_rng(0)
        arrays = {**init_transformer_params(rng, 8, 16, "intra"), **init_transformer_params(rng, 8, 16, "inter")}
        E = rng.standard_normal((3, 5, 8))
        out = blockformer_block(constant(E), _zeroed(arrays), 2)
        np.testing.assert_array_equal(out.data, E)

    def test_intra_path_follows_frame_order(self):
        rng = np.random.default_rng(1)
        p = ParamSet.from_arrays(init_transformer_params(rng, 8, 16))
        E = rng.standard_normal((2, 6, 8))
        pe = positional_encoding(6, 8)
        out = transformer_layer(constant(E), p, 2, pos=pe).data
        swapped = transformer_layer(constant(E[::-1].copy()), p, 2, pos=pe).data
        assert_allclose(swapped, out[::-1], atol=1e-12)

    def test_mask_head_range(self):
        rng = np.random.default_rng(2)
        E = constant(rng.standard_normal((4, 5, 8)))
        p = _zeroed(init_linear_params(rng, 8, 1))
        assert_allclose(mask_head(E, p).data, 0.5, atol=0.0)
        p["b"].data[...] = 20.0
        assert np.all(mask_head(E, p).data > 0.9999)

    def test_masked_magnitude_loses_energy(self):
        model = EnhancerModel.initialize(SMALL, seed=4)
        noisy = AudioBuffer(speech_like(2000, seed=4), SR)
        _, mask = forward(model, noisy)
        magnitude = np.abs(stft(noisy, SMALL.win_len, SMALL.hop).frames)
        assert np.linalg.norm(mask.values * magnitude) < np.linalg.norm(magnitude)


class TestGradients:
    @pytest.mark.parametrize("name", ["embed", "blockformer_block", "mask_head", "masked_istft", "snr_loss"])
    def test_model_components(self, name):
        check = dict(gradcheck_suite.PRIMITIVE_CHECKS)[name]
        assert check(np.random.default_rng(11)) < 1e-4

    def test_end_to_end_tiny_enhancer(self):
        err = gradcheck_suite.check_enhancer(TINY_CONFIG, TINY_INPUT_LEN, np.random.default_rng(0))
        assert err < 1e-4
