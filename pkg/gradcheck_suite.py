#!/usr/bin/env python3
"""
梯度检查套件：逐个检查自动微分原语与层，最后对整个增强模型的损失做端到端检查
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from audio_dsp import AudioBuffer, mag_phase, stft
from blockformer import EnhancerModel, ModelConfig, blockformer_block, embed, mask_head, masked_istft
from config import GRADCHECK_EPS, GRADCHECK_THRESHOLD
from nn_core import (
    DiffValue,
    ParamSet,
    bgru,
    gru_cell,
    init_attention_params,
    init_gru_params,
    init_linear_params,
    init_transformer_params,
    grad_check,
    layer_norm,
    linear,
    multi_head_attention,
    positional_encoding,
    sigmoid,
    softmax,
    tanh_act,
    transformer_layer,
)
from training import snr_loss


class Colors:
    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    BLUE = '\033[34m'
    CYAN = '\033[36m'
    RESET = '\033[0m'


# 端到端检查用的极小配置：F = 9，输入 36 个样点 -> T = 10 帧
TINY_CONFIG = ModelConfig(win_len=16, hop=4, hidden=3, d_model=4, heads=2, repeats=1, d_ff=8)
TINY_INPUT_LEN = 36
# 默认配置参数太多，每个张量只抽查若干坐标
DEFAULT_INPUT_LEN = 1152
DEFAULT_COORDS_PER_PARAM = 3

GradHook = Callable[[str, np.ndarray], np.ndarray]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.threshold


@dataclass
class SuiteReport:
    config_name: str
    results: List[CheckResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)


def corrupt_gradient(name: str, g: np.ndarray) -> np.ndarray:
    """负对照：把解析梯度放大 1.5 倍再加偏移"""
    return g * 1.5 + 1e-3


def _check(f: Callable[[], DiffValue], p: ParamSet, hook: Optional[GradHook],
           coords_per_param: Optional[int] = None) -> float:
    return grad_check(f, p, eps=GRADCHECK_EPS, coords_per_param=coords_per_param, grad_hook=hook)


# ----------------------------------------------------------------------
# 原语与层
# ----------------------------------------------------------------------
def check_linear(rng, hook=None) -> float:
    arrays = {"x": rng.standard_normal((3, 4))}
    arrays.update(init_linear_params(rng, 4, 5))
    arrays["b"] = rng.standard_normal(5)
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((3, 5))
    return _check(lambda: (linear(p["x"], p["W"], p["b"]) * weights).sum(), p, hook)


def check_sigmoid(rng, hook=None) -> float:
    p = ParamSet.from_arrays({"x": rng.standard_normal((4, 3)) * 3.0})
    weights = rng.standard_normal((4, 3))
    return _check(lambda: (sigmoid(p["x"]) * weights).sum(), p, hook)


def check_tanh(rng, hook=None) -> float:
    p = ParamSet.from_arrays({"x": rng.standard_normal((4, 3))})
    weights = rng.standard_normal((4, 3))
    return _check(lambda: (tanh_act(p["x"]) * weights).sum(), p, hook)


def check_softmax(rng, hook=None) -> float:
    p = ParamSet.from_arrays({"x": rng.standard_normal((3, 5))})
    weights = rng.standard_normal((3, 5))
    return _check(lambda: (softmax(p["x"], axis=-1) * weights).sum(), p, hook)


def check_layer_norm(rng, hook=None) -> float:
    p = ParamSet.from_arrays({
        "x": rng.standard_normal((3, 6)),
        "gamma": 1.0 + 0.1 * rng.standard_normal(6),
        "beta": 0.1 * rng.standard_normal(6),
    })
    weights = rng.standard_normal((3, 6))
    return _check(lambda: (layer_norm(p["x"], p["gamma"], p["beta"]) * weights).sum(), p, hook)


def check_gru_cell(rng, hook=None) -> float:
    arrays = {"x": rng.standard_normal(4), "h": rng.standard_normal(3) * 0.5}
    arrays.update(init_gru_params(rng, 4, 3, prefix="gru"))
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal(3)
    return _check(lambda: (gru_cell(p["x"], p["h"], p.sub("gru")) * weights).sum(), p, hook)


def check_bgru(rng, hook=None) -> float:
    arrays = {"seq": rng.standard_normal((5, 4))}
    arrays.update(init_gru_params(rng, 4, 3, prefix="fwd"))
    arrays.update(init_gru_params(rng, 4, 3, prefix="bwd"))
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((5, 6))
    return _check(lambda: (bgru(p["seq"], p.sub("fwd"), p.sub("bwd")) * weights).sum(), p, hook)


def check_multi_head_attention(rng, hook=None) -> float:
    arrays = {"X": rng.standard_normal((2, 5, 4))}
    arrays.update(init_attention_params(rng, 4, prefix="attn"))
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((2, 5, 4))
    return _check(lambda: (multi_head_attention(p["X"], p.sub("attn"), 2) * weights).sum(), p, hook)


def _perturbed_transformer(rng, d: int, d_ff: int, prefix: str) -> Dict[str, np.ndarray]:
    # 偏置和 LayerNorm 参数随机化，避免检查落在初始化的特殊点上
    arrays = init_transformer_params(rng, d, d_ff, prefix=prefix)
    for name in list(arrays):
        if name.endswith(("beta", "b1", "b2")):
            arrays[name] = 0.1 * rng.standard_normal(arrays[name].shape)
        elif name.endswith("gamma"):
            arrays[name] = 1.0 + 0.1 * rng.standard_normal(arrays[name].shape)
    return arrays


def check_transformer_layer(rng, hook=None) -> float:
    arrays = {"X": rng.standard_normal((5, 4))}
    arrays.update(_perturbed_transformer(rng, 4, 8, "layer"))
    p = ParamSet.from_arrays(arrays)
    pos = positional_encoding(5, 4)
    weights = rng.standard_normal((5, 4))
    return _check(lambda: (transformer_layer(p["X"], p.sub("layer"), 2, pos=pos) * weights).sum(), p, hook)


def check_embed(rng, hook=None) -> float:
    mag = np.abs(rng.standard_normal((4, 5)))
    arrays = {"g": rng.standard_normal((4, 6))}
    arrays.update(init_linear_params(rng, 7, 4, prefix="embed"))
    arrays["embed.b"] = rng.standard_normal(4)
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((4, 5, 4))
    return _check(lambda: (embed(mag, p["g"], p.sub("embed")) * weights).sum(), p, hook)


def check_blockformer_block(rng, hook=None) -> float:
    arrays = {"E": rng.standard_normal((3, 5, 4))}
    arrays.update(_perturbed_transformer(rng, 4, 8, "block.intra"))
    arrays.update(_perturbed_transformer(rng, 4, 8, "block.inter"))
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((3, 5, 4))
    return _check(lambda: (blockformer_block(p["E"], p.sub("block"), 2) * weights).sum(), p, hook)


def check_mask_head(rng, hook=None) -> float:
    arrays = {"E": rng.standard_normal((3, 5, 4))}
    arrays.update(init_linear_params(rng, 4, 1, prefix="mask"))
    arrays["mask.b"] = rng.standard_normal(1)
    p = ParamSet.from_arrays(arrays)
    weights = rng.standard_normal((3, 5))
    return _check(lambda: (mask_head(p["E"], p.sub("mask")) * weights).sum(), p, hook)


def check_masked_istft(rng, hook=None) -> float:
    buf = AudioBuffer(rng.standard_normal(TINY_INPUT_LEN) * 0.3, TINY_CONFIG.sample_rate)
    spec = stft(buf, TINY_CONFIG.win_len, TINY_CONFIG.hop)
    mp = mag_phase(spec)
    p = ParamSet.from_arrays({"mag": mp.magnitude * rng.uniform(0.2, 1.0, mp.magnitude.shape)})
    weights = rng.standard_normal(TINY_INPUT_LEN)
    return _check(lambda: (masked_istft(p["mag"], mp.phase, spec) * weights).sum(), p, hook)


def check_snr_loss(rng, hook=None) -> float:
    clean = rng.standard_normal(32)
    p = ParamSet.from_arrays({"est": clean + 0.3 * rng.standard_normal(32)})
    return _check(lambda: snr_loss(clean, p["est"]), p, hook)


def check_enhancer(config: ModelConfig, input_len: int, rng, hook=None,
                   coords_per_param: Optional[int] = None) -> float:
    """snr_loss(clean, forward(model, noisy)) 对全部模型参数求导"""
    model = EnhancerModel.initialize(config, seed=int(rng.integers(0, 2 ** 31)))
    for name, value in model.params.items():
        if name.endswith(("beta", "b1", "b2", ".b")):
            value.data[...] = 0.1 * rng.standard_normal(value.shape)
    t = np.arange(input_len) / config.sample_rate
    clean = 0.5 * np.sin(2.0 * np.pi * 440.0 * t)
    noisy = clean + 0.2 * rng.standard_normal(input_len)
    return _check(
        lambda: snr_loss(clean, model.forward_graph(noisy)[0]),
        model.params, hook, coords_per_param=coords_per_param,
    )


PRIMITIVE_CHECKS: List[Tuple[str, Callable]] = [
    ("linear", check_linear),
    ("sigmoid", check_sigmoid),
    ("tanh", check_tanh),
    ("softmax", check_softmax),
    ("layer_norm", check_layer_norm),
    ("gru_cell", check_gru_cell),
    ("bgru", check_bgru),
    ("multi_head_attention", check_multi_head_attention),
    ("transformer_layer", check_transformer_layer),
    ("embed", check_embed),
    ("blockformer_block", check_blockformer_block),
    ("mask_head", check_mask_head),
    ("masked_istft", check_masked_istft),
    ("snr_loss", check_snr_loss),
]


def run_suite(config_name: str = "tiny", corrupt: bool = False, seed: int = 0,
              verbose: bool = True) -> SuiteReport:
    """运行全部检查；corrupt=True 时解析梯度被篡改，应当全部失败"""
    if config_name not in ("tiny", "default"):
        raise ValueError(f"unknown gradcheck config '{config_name}' (tiny|default)")
    hook = corrupt_gradient if corrupt else None
    report = SuiteReport(config_name=config_name)

    if verbose:
        print(f"\n{Colors.BLUE}{'='*60}{Colors.RESET}")
        print(f"{Colors.BLUE}Gradient Check Suite ({config_name}){Colors.RESET}")
        print(f"{Colors.BLUE}{'='*60}{Colors.RESET}")

    checks: List[Tuple[str, Callable[[np.random.Generator], float]]] = [
        (name, lambda rng, fn=fn: fn(rng, hook)) for name, fn in PRIMITIVE_CHECKS
    ]
    checks.append(("enhancer[tiny]", lambda rng: check_enhancer(TINY_CONFIG, TINY_INPUT_LEN, rng, hook)))
    if config_name == "default":
        checks.append((
            "enhancer[default]",
            lambda rng: check_enhancer(ModelConfig(), DEFAULT_INPUT_LEN, rng, hook, DEFAULT_COORDS_PER_PARAM),
        ))

    for i, (name, fn) in enumerate(checks):
        err = fn(np.random.default_rng([seed, i]))
        result = CheckResult(name=name, max_rel_error=err)
        report.results.append(result)
        if verbose:
            status = f"{Colors.GREEN}✓ PASS{Colors.RESET}" if result.passed else f"{Colors.RED}✗ FAIL{Colors.RESET}"
            print(f"{status}  {name:<24} max rel err {err:.3e}")

    if verbose:
        passed = sum(r.passed for r in report.results)
        color = Colors.GREEN if report.all_passed else Colors.RED
        print(f"\n{color}{passed}/{len(report.results)} checks below {GRADCHECK_THRESHOLD:g}{Colors.RESET}")
    return report


if __name__ == "__main__":
    import sys

    sys.exit(0 if run_suite("tiny").all_passed else 2)
