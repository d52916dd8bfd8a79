"""
BGRU + 双路 Blockformer 掩码模型

|STFT| -> BGRU -> embed -> R x (intra 频率轴 / 置换 / inter 时间轴) -> sigmoid 掩码
-> 掩码乘原始幅度 + 混合信号相位 -> iSTFT 波形
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from audio_dsp import (
    AudioBuffer,
    Spectrogram,
    istft,
    mag_phase,
    overlap_add_adjoint,
    recombine,
    stft,
)
from config import D_FF, D_MODEL, GRU_HIDDEN, HOP, N_HEADS, N_REPEATS, SAMPLE_RATE, WIN_LEN
from nn_core import (
    DiffValue,
    ParamSet,
    bgru,
    constant,
    custom_op,
    init_gru_params,
    init_linear_params,
    init_transformer_params,
    linear,
    no_grad,
    positional_encoding,
    sigmoid,
    transformer_layer,
)


class ModelConfigError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    win_len: int = WIN_LEN
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    hidden: int = GRU_HIDDEN
    d_model: int = D_MODEL
    heads: int = N_HEADS
    repeats: int = N_REPEATS
    d_ff: int = D_FF

    @property
    def n_bins(self) -> int:
        return self.win_len // 2 + 1

    def validate(self) -> "ModelConfig":
        for key, value in asdict(self).items():
            if int(value) <= 0:
                raise ModelConfigError(f"{key} must be positive, got {value}")
        if self.win_len % 2:
            raise ModelConfigError(f"win_len must be even, got {self.win_len}")
        if self.hop > self.win_len:
            raise ModelConfigError(f"hop ({self.hop}) must not exceed win_len ({self.win_len})")
        if self.d_model % self.heads:
            raise ModelConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ModelConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        return self

    def to_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        known = set(asdict(cls()).keys())
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key in known:
                values[key] = int(value)
        return cls(**values).validate()


@dataclass
class Mask:
    values: np.ndarray  # [T, F]，每个值都在 (0, 1)


def _init_arrays(config: ModelConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    F, H, d = config.n_bins, config.hidden, config.d_model
    arrays: Dict[str, np.ndarray] = {}
    arrays.update(init_gru_params(rng, F, H, prefix="bgru.fwd"))
    arrays.update(init_gru_params(rng, F, H, prefix="bgru.bwd"))
    arrays.update(init_linear_params(rng, 1 + 2 * H, d, prefix="embed"))
    for r in range(config.repeats):
        arrays.update(init_transformer_params(rng, d, config.d_ff, prefix=f"blocks.{r}.intra"))
        arrays.update(init_transformer_params(rng, d, config.d_ff, prefix=f"blocks.{r}.inter"))
    arrays.update(init_linear_params(rng, d, 1, prefix="mask"))
    return arrays


def _shape_table(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """与 _init_arrays 相同的命名和形状，只做算术，不分配参数"""
    F, H, d, d_ff = config.n_bins, config.hidden, config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {}
    for direction in ("fwd", "bwd"):
        for gate in ("z", "r", "h"):
            shapes[f"bgru.{direction}.W_{gate}"] = (F, H)
            shapes[f"bgru.{direction}.U_{gate}"] = (H, H)
            shapes[f"bgru.{direction}.b_{gate}"] = (H,)
    shapes["embed.W"], shapes["embed.b"] = (1 + 2 * H, d), (d,)
    for r in range(config.repeats):
        for path in ("intra", "inter"):
            head = f"blocks.{r}.{path}"
            for norm in ("ln1", "ln2"):
                shapes[f"{head}.{norm}.gamma"] = (d,)
                shapes[f"{head}.{norm}.beta"] = (d,)
            shapes[f"{head}.ffn.W1"], shapes[f"{head}.ffn.b1"] = (d, d_ff), (d_ff,)
            shapes[f"{head}.ffn.W2"], shapes[f"{head}.ffn.b2"] = (d_ff, d), (d,)
            for name in ("Q", "K", "V", "O"):
                shapes[f"{head}.attn.W_{name}"] = (d, d)
    shapes["mask.W"], shapes["mask.b"] = (d, 1), (1,)
    return shapes


def embed(mag: np.ndarray, g: DiffValue, p: ParamSet) -> DiffValue:
    """e_{t,f} = [ln(1 + mag_{t,f}), g_t] @ W + b，所有 (t, f) 共享同一个投影"""
    mag = np.asarray(mag, dtype=np.float64)
    W, b = p["W"], p["b"]
    if mag.ndim != 2 or g.ndim != 2 or g.shape[0] != mag.shape[0]:
        raise ModelInputError(f"embed: magnitude {mag.shape} and BGRU output {g.shape} disagree")
    if W.shape[0] != 1 + g.shape[1]:
        raise ModelInputError(f"embed: projection rows {W.shape[0]} != 1 + {g.shape[1]}")
    T = mag.shape[0]
    # 拼接后线性投影 == 标量项 W[0] 与帧向量项 W[1:] 之和，避免展开 [T, F, 1+2H]
    mag_term = constant(np.log1p(mag)[..., None]) * W[0]
    frame_term = linear(g, W[1:]).reshape(T, 1, W.shape[1])
    return mag_term + frame_term + b


def blockformer_block(E: DiffValue, p_block: ParamSet, heads: int) -> DiffValue:
    """intra（每帧内沿频率）-> 置换 -> inter（每个频点沿时间）-> 置换回来"""
    if E.ndim != 3:
        raise ModelInputError(f"blockformer_block expects [T, F, d], got {E.shape}")
    T, F, d = E.shape
    X = transformer_layer(E, p_block.sub("intra"), heads, pos=positional_encoding(F, d))
    X = X.transpose(1, 0, 2)
    X = transformer_layer(X, p_block.sub("inter"), heads, pos=positional_encoding(T, d))
    return X.transpose(1, 0, 2)


def mask_head(E: DiffValue, p: ParamSet) -> DiffValue:
    if E.ndim != 3 or E.shape[-1] != p["W"].shape[0]:
        raise ModelInputError(f"mask_head: embedding {E.shape} vs projection {p['W'].shape}")
    T, F, _ = E.shape
    return sigmoid(linear(E, p["W"], p["b"])).reshape(T, F)


def masked_istft(masked_mag: DiffValue, phase: np.ndarray, spec: Spectrogram) -> DiffValue:
    """可微 iSTFT：相位固定为混合信号相位，只对实数幅度求导"""
    n = spec.win_len
    samples = istft(recombine(masked_mag.data, phase, spec)).samples
    cos_p, sin_p = np.cos(phase), np.sin(phase)
    # 单边谱的权重：DC 与 Nyquist 为 1，其余为 2
    weights = np.full(spec.frames.shape[1], 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    weights /= n

    def vjp(g):
        frame_grad = overlap_add_adjoint(g, spec.frames.shape[0], n, spec.hop)
        G = np.fft.rfft(frame_grad, n=n, axis=-1)
        d_re = weights * G.real
        d_im = weights * G.imag
        d_im[:, 0] = 0.0
        d_im[:, -1] = 0.0
        return (d_re * cos_p + d_im * sin_p,)

    return custom_op(samples, (masked_mag,), vjp, op="masked_istft")


class EnhancerModel:
    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config.validate()
        self.params = params
        expected = self.param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise ModelConfigError(f"missing parameter: {name}")
            if params[name].shape != shape:
                raise ModelConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "EnhancerModel":
        config.validate()
        arrays = _init_arrays(config, np.random.default_rng(seed))
        return cls(config, ParamSet.from_arrays(arrays))

    @staticmethod
    def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        shapes = _shape_table(config)
        return {name: shapes[name] for name in sorted(shapes)}

    def num_parameters(self) -> int:
        return self.params.num_values()

    def set_mask_bias(self, value: float) -> None:
        """强制掩码偏置（+20 时 sigmoid 饱和，掩码接近全 1）"""
        self.params["mask.b"].data[...] = value

    def forward_graph(
        self, samples: np.ndarray, mask_override: Optional[np.ndarray] = None
    ) -> Tuple[DiffValue, DiffValue]:
        cfg = self.config
        noisy = AudioBuffer(samples, cfg.sample_rate)
        if len(noisy) == 0:
            raise ModelInputError("cannot enhance an empty buffer")

        spec = stft(noisy, cfg.win_len, cfg.hop)
        mp = mag_phase(spec)
        features = constant(np.log1p(mp.magnitude))

        g = bgru(features, self.params.sub("bgru.fwd"), self.params.sub("bgru.bwd"))
        E = embed(mp.magnitude, g, self.params.sub("embed"))
        for r in range(cfg.repeats):
            E = blockformer_block(E, self.params.sub(f"blocks.{r}"), cfg.heads)
        mask = mask_head(E, self.params.sub("mask"))

        if mask_override is not None:
            mask = constant(np.broadcast_to(mask_override, mask.shape))

        est = masked_istft(mask * constant(mp.magnitude), mp.phase, spec)
        return est, mask


def forward(
    model: EnhancerModel, noisy: AudioBuffer, mask_override: Optional[np.ndarray] = None
) -> Tuple[AudioBuffer, Mask]:
    if noisy.sample_rate != model.config.sample_rate:
        raise ModelInputError(
            f"input sample rate {noisy.sample_rate} Hz, expected {model.config.sample_rate} Hz"
        )
    # 推理不建计算图
    with no_grad():
        est, mask = model.forward_graph(noisy.samples, mask_override=mask_override)
    return AudioBuffer(est.data.copy(), noisy.sample_rate), Mask(mask.data.copy())
