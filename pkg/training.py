"""
训练：负 SNR 损失、按清单合成批次、Adam 优化循环、检查点格式

检查点二进制格式（全部小端）：
    8 字节魔数 b"BGTSE\\0\\0\\1"
    u64 长度 + UTF-8 配置文本（key=value 行，含 format_version）
    u64 张量个数；每个张量：u64 名字长度 + 名字，u64 rank，rank 个 u64 维度，float64 数据
    u64 训练步数
    u64 长度 + UTF-8 JSON 随机数状态
    8 字节校验和：BLAKE2b(digest_size=8) 覆盖之前的所有字节
"""

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from blockformer import EnhancerModel, ModelConfig
from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BATCH_SIZE,
    CHECKPOINT_EVERY,
    CROP_RETRIES,
    LEARNING_RATE,
    LOSS_CAP_DB,
    SEGMENT_LEN,
    TRAIN_SEED,
    TRAIN_STEPS,
)
from mixgen import AudioCache, ManifestEntry, read_manifest, synthesize_entry
from nn_core import AdamState, DiffValue, ParamSet, adam_step, as_value, backward, constant, custom_op

CHECKPOINT_MAGIC = b"BGTSE\x00\x00\x01"
CHECKPOINT_VERSION = 1
SNR_LOSS_EPS = 1e-8


class TrainingError(ValueError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class EmptySplitError(TrainingError):
    pass


class CheckpointError(TrainingError):
    pass


class BadMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    manifest: str
    model: ModelConfig = field(default_factory=ModelConfig)
    segment_len: int = SEGMENT_LEN
    batch_size: int = BATCH_SIZE
    steps: int = TRAIN_STEPS
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    seed: int = TRAIN_SEED
    checkpoint_every: int = CHECKPOINT_EVERY
    loss_cap_db: float = LOSS_CAP_DB
    out_ckpt: str = "enhancer.ckpt"
    log_path: Optional[str] = None

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.steps < 1:
            raise TrainingError(f"steps must be >= 1, got {self.steps}")
        if self.segment_len < self.model.win_len:
            raise TrainingError(
                f"segment_len ({self.segment_len}) must be >= win_len ({self.model.win_len})"
            )
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise TrainingError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return self


def load_train_config(config_path: str, **overrides) -> TrainConfig:
    """从 YAML 加载训练配置；overrides 中非 None 的值覆盖文件内容"""
    with open(config_path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}

    model_raw = raw.pop("model", {}) or {}
    optimizer_raw = raw.pop("optimizer", {}) or {}
    raw.update(optimizer_raw)
    known = {f.name for f in fields(TrainConfig)} - {"model"}
    unknown = set(raw) - known
    if unknown:
        raise TrainingError(f"unknown training config keys: {', '.join(sorted(unknown))}")

    model = ModelConfig(**model_raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if "manifest" not in raw:
        raise TrainingError("training config needs a manifest path")
    return TrainConfig(model=model, **raw)


@dataclass
class Batch:
    noisy: np.ndarray  # [B, S]
    clean: np.ndarray  # [B, S]
    noise: np.ndarray  # [B, S]
    entries: List[ManifestEntry]


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    step: int
    rng_state: str
    format_version: int = CHECKPOINT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: List[str]
    losses: List[float]


# ----------------------------------------------------------------------
# 损失
# ----------------------------------------------------------------------
def snr_loss(clean: np.ndarray, est, cap_db: float = LOSS_CAP_DB) -> DiffValue:
    """L = -10*log10(sum clean^2 / (sum (clean - est)^2 + 1e-8))，下限 -cap_db（下限处梯度为 0）"""
    clean = np.asarray(clean, dtype=np.float64)
    est = as_value(est)
    if clean.shape != est.shape:
        raise TrainingError(f"clean has shape {clean.shape}, estimate has {est.shape}")
    clean_energy = float(np.sum(clean ** 2))
    if clean_energy <= 0.0:
        raise TrainingError("clean reference is silent; SNR loss undefined")

    residual = constant(clean) - est
    residual_energy = (residual * residual).sum() + SNR_LOSS_EPS
    loss = residual_energy.log() * (10.0 / np.log(10.0)) - 10.0 * np.log10(clean_energy)

    if loss.item() < -cap_db:
        return custom_op(np.array(-cap_db), (loss,), lambda g: (np.zeros_like(loss.data),), op="loss_floor")
    return loss


# ----------------------------------------------------------------------
# 批次
# ----------------------------------------------------------------------
def _crop_start(clean: np.ndarray, segment_len: int, rng: np.random.Generator, entry: ManifestEntry) -> int:
    """随机裁剪起点；纯净语音整段静音时重抽，仍不行就取能量最大的窗口"""
    n = len(clean)
    for _ in range(CROP_RETRIES):
        start = int(rng.integers(0, n - segment_len + 1))
        if np.any(clean[start:start + segment_len]):
            return start
    energy = np.concatenate(([0.0], np.cumsum(clean ** 2)))
    start = int(np.argmax(energy[segment_len:] - energy[:-segment_len]))
    logging.warning(
        f"entry {entry.index} ({entry.clean_id}): {CROP_RETRIES} random crops were silent, "
        f"using the loudest window at sample {start}"
    )
    return start


def make_batch(
    entries: Sequence[ManifestEntry],
    segment_len: int,
    seed: int,
    cache: Optional[AudioCache] = None,
) -> Batch:
    """逐条合成并随机裁剪 segment_len（避开整段静音）；不足则三路同时右侧补零"""
    cache = cache or AudioCache()
    rng = np.random.default_rng(seed)
    noisy, clean, noise = [], [], []
    for entry in entries:
        try:
            mixture = synthesize_entry(entry, cache)
        except Exception as e:
            logging.error(f"synthesis failed for entry {entry.index} ({entry.clean_id} + {entry.noise_id}): {e}")
            raise

        n = len(mixture.mixture)
        if n >= segment_len:
            start = _crop_start(mixture.clean.samples, segment_len, rng, entry)
            sl = slice(start, start + segment_len)
            noisy.append(mixture.mixture.samples[sl])
            clean.append(mixture.clean.samples[sl])
            noise.append(mixture.noise.samples[sl])
        else:
            pad = (0, segment_len - n)
            noisy.append(np.pad(mixture.mixture.samples, pad))
            clean.append(np.pad(mixture.clean.samples, pad))
            noise.append(np.pad(mixture.noise.samples, pad))

    return Batch(
        noisy=np.stack(noisy),
        clean=np.stack(clean),
        noise=np.stack(noise),
        entries=list(entries),
    )


# ----------------------------------------------------------------------
# 单步与训练循环
# ----------------------------------------------------------------------
def train_step(
    model: EnhancerModel,
    batch: Batch,
    state: AdamState,
    lr: float = LEARNING_RATE,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    adam_eps: float = ADAM_EPS,
    cap_db: float = LOSS_CAP_DB,
) -> float:
    """前向 -> 平均 SNR 损失 -> 反向 -> Adam；返回更新前的平均损失

    每条样本单独反向并把 1/B 缩放后的梯度累加到参数上，同一时刻只有一张计算图。
    """
    model.params.zero_grad()
    weight = 1.0 / len(batch.entries)
    total = 0.0
    for i, entry in enumerate(batch.entries):
        est, _ = model.forward_graph(batch.noisy[i])
        loss = snr_loss(batch.clean[i], est, cap_db)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} on entry {entry.index} "
                f"({entry.clean_id} + {entry.noise_id} @ {entry.target_snr_db:+.1f} dB)"
            )
        total += loss.item()
        backward(loss * weight)

    adam_step(model.params, state, lr=lr, beta1=beta1, beta2=beta2, eps=adam_eps)
    return total * weight


def _batch_indices(step: int, batch_size: int, n_entries: int, seed: int) -> List[int]:
    """第 step 步的条目：把清单按轮次（每轮一个种子化排列）首尾相接后取连续一段"""
    indices = []
    for k in range(step * batch_size, (step + 1) * batch_size):
        cycle, pos = divmod(k, n_entries)
        order = np.random.default_rng([seed, cycle]).permutation(n_entries)
        indices.append(int(order[pos]))
    return indices


def _pack_checkpoint(model: EnhancerModel, state: AdamState, step: int, rng: np.random.Generator) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {}
    for name, value in model.params.items():
        tensors[name] = value.data.copy()
    for name in model.params.names():
        tensors[f"adam.m.{name}"] = state.m[name].copy()
        tensors[f"adam.v.{name}"] = state.v[name].copy()
    return Checkpoint(
        config=model.config,
        tensors=tensors,
        step=step,
        rng_state=json.dumps(rng.bit_generator.state, sort_keys=True),
    )


def _unpack_checkpoint(ckpt: Checkpoint) -> Tuple[EnhancerModel, AdamState, np.random.Generator]:
    model = model_from_checkpoint(ckpt)
    state = AdamState(t=ckpt.step)
    for name in model.params.names():
        state.m[name] = ckpt.tensors.get(f"adam.m.{name}", np.zeros_like(model.params[name].data)).copy()
        state.v[name] = ckpt.tensors.get(f"adam.v.{name}", np.zeros_like(model.params[name].data)).copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(ckpt.rng_state)
    return model, state, rng


def model_from_checkpoint(ckpt: Checkpoint) -> EnhancerModel:
    names = EnhancerModel.param_shapes(ckpt.config)
    return EnhancerModel(ckpt.config, ParamSet.from_arrays({n: ckpt.tensors[n] for n in names}))


def train_loop(cfg: TrainConfig, resume: Optional[str] = None, progress: bool = True) -> TrainResult:
    cfg.validate()
    entries = [e for e in read_manifest(cfg.manifest) if e.split == "train"]
    if not entries:
        raise EmptySplitError(f"manifest {cfg.manifest} has no train entries")

    if resume:
        ckpt = load_checkpoint(resume, expected=cfg.model)
        model, state, rng = _unpack_checkpoint(ckpt)
        start = ckpt.step
        logging.info(f"resumed from {resume} at step {start}")
    else:
        model = EnhancerModel.initialize(cfg.model, seed=cfg.seed)
        state = AdamState.for_params(model.params)
        rng = np.random.default_rng(cfg.seed)
        start = 0

    logging.info(
        f"training {model.num_parameters()} parameters on {len(entries)} entries, "
        f"steps {start + 1}..{cfg.steps}"
    )

    cache = AudioCache(cfg.model.sample_rate)
    out_path = Path(cfg.out_ckpt)
    log_file = open(cfg.log_path, "a" if resume else "w", encoding="utf-8") if cfg.log_path else None
    log_lines: List[str] = []
    losses: List[float] = []

    try:
        for step in tqdm(range(start, cfg.steps), desc="Training", disable=not progress):
            t0 = time.perf_counter()
            batch_seed = int(rng.integers(0, 2 ** 63 - 1))
            chosen = [entries[i] for i in _batch_indices(step, cfg.batch_size, len(entries), cfg.seed)]
            batch = make_batch(chosen, cfg.segment_len, batch_seed, cache)
            loss = train_step(
                model, batch, state,
                lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps,
                cap_db=cfg.loss_cap_db,
            )
            wall_ms = (time.perf_counter() - t0) * 1000.0

            line = f"{step + 1}\t{loss:.6f}\t{wall_ms:.1f}"
            log_lines.append(line)
            losses.append(loss)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            logging.debug(f"step {step + 1}: loss {loss:.4f} dB ({wall_ms:.0f} ms)")

            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                periodic = out_path.with_name(f"{out_path.stem}.step{done}{out_path.suffix}")
                save_checkpoint(str(periodic), _pack_checkpoint(model, state, done, rng))
    finally:
        if log_file:
            log_file.close()

    final = _pack_checkpoint(model, state, cfg.steps, rng)
    save_checkpoint(str(out_path), final)
    return TrainResult(checkpoint=final, log_lines=log_lines, losses=losses)


# ----------------------------------------------------------------------
# 检查点
# ----------------------------------------------------------------------
def _u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def _blob(data: bytes) -> bytes:
    return _u64(len(data)) + data


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    config_text = f"format_version={ckpt.format_version}\n" + ckpt.config.to_text()
    parts = [CHECKPOINT_MAGIC, _blob(config_text.encode("utf-8")), _u64(len(ckpt.tensors))]
    for name, tensor in ckpt.tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f8")
        parts.append(_blob(name.encode("utf-8")))
        parts.append(_u64(arr.ndim))
        parts.extend(_u64(d) for d in arr.shape)
        parts.append(arr.tobytes())
    parts.append(_u64(ckpt.step))
    parts.append(_blob(ckpt.rng_state.encode("utf-8")))
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(payload + _checksum(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u64())


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """读取并校验检查点；给出 expected 时逐个张量核对形状"""
    with open(path, "rb") as f:
        data = f.read()

    if data[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    if len(data) < 16 or _checksum(data[:-8]) != data[-8:]:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")

    reader = _Reader(data[:-8])
    reader.take(8)
    config_text = reader.blob().decode("utf-8")
    version = CHECKPOINT_VERSION
    for line in config_text.splitlines():
        if line.startswith("format_version="):
            version = int(line.split("=", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_text(config_text)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u64()):
        name = reader.blob().decode("utf-8")
        rank = reader.u64()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    step = reader.u64()
    rng_state = reader.blob().decode("utf-8")

    target = expected or config
    for name, shape in EnhancerModel.param_shapes(target).items():
        if name not in tensors:
            raise CheckpointMismatchError(f"{path}: tensor {name} missing")
        if tensors[name].shape != shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, config expects {shape}"
            )
    if expected is not None and expected != config:
        raise CheckpointMismatchError(f"{path}: stored config {config} differs from {expected}")

    return Checkpoint(config=config, tensors=tensors, step=step, rng_state=rng_state, format_version=version)


def initial_checkpoint(config: ModelConfig, seed: int = TRAIN_SEED, mask_bias: Optional[float] = None) -> Checkpoint:
    """未训练模型的检查点；mask_bias 可强制掩码偏置（+20 即直通掩码）"""
    model = EnhancerModel.initialize(config, seed)
    if mask_bias is not None:
        model.set_mask_bias(mask_bias)
    return _pack_checkpoint(model, AdamState.for_params(model.params), 0, np.random.default_rng(seed))

