import logging
import os
from dataclasses import dataclass
from math import gcd
from typing import Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from config import HOP, PCM_SCALE, WIN_LEN


class AudioError(ValueError):
    pass


class WavFileMissingError(AudioError, FileNotFoundError):
    pass


class WavHeaderError(AudioError):
    pass


class WavCodecError(AudioError):
    pass


class WavWriteError(AudioError, OSError):
    pass


class EmptyBufferError(AudioError):
    pass


class InvalidFrameError(AudioError):
    pass


class IstftError(AudioError):
    pass


class ShapeMismatchError(AudioError):
    pass


@dataclass
class AudioBuffer:
    """单声道波形 + 采样率，内部统一为 float64"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy(), self.sample_rate)


@dataclass
class Spectrogram:
    frames: np.ndarray  # [T, F] complex128
    win_len: int
    hop: int
    original_len: int
    sample_rate: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape


@dataclass
class MagPhase:
    magnitude: np.ndarray  # [T, F] >= 0
    phase: np.ndarray  # [T, F] in (-pi, pi]


def read_wav(path: str) -> AudioBuffer:
    """读取WAV文件

    支持 PCM 16-bit 与 IEEE float 32-bit；多声道取平均为单声道。
    """
    if not os.path.isfile(path):
        raise WavFileMissingError(f"WAV file not found: {path}")

    try:
        sample_rate, data = wavfile.read(path)
    except ValueError as e:
        msg = str(e)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise WavCodecError(f"unsupported codec in {path}: {msg}") from e
        raise WavHeaderError(f"malformed WAV header in {path}: {msg}") from e
    except (EOFError, OSError) as e:
        raise WavHeaderError(f"malformed WAV header in {path}: {e}") from e

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavCodecError(
            f"unsupported codec in {path}: sample type {data.dtype} (need PCM16 or float32)"
        )

    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    return AudioBuffer(samples, sample_rate)


def write_wav(path: str, buf: AudioBuffer) -> None:
    """写出 16-bit PCM 单声道：先截断到 [-1, 1 - 2^-15]，再 round(s * 32768)"""
    clipped = np.clip(buf.samples, -1.0, 1.0 - 1.0 / PCM_SCALE)
    pcm = np.round(clipped * PCM_SCALE).astype(np.int16)
    try:
        wavfile.write(path, buf.sample_rate, pcm)
    except OSError as e:
        raise WavWriteError(f"cannot write WAV file {path}: {e}") from e


def hann_window(n: int) -> np.ndarray:
    """周期 Hann 窗：w[k] = 0.5 * (1 - cos(2*pi*k/n))"""
    if n < 2:
        raise InvalidFrameError(f"window length must be >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def _check_geometry(win_len: int, hop: int) -> None:
    if hop <= 0:
        raise InvalidFrameError(f"hop must be positive, got {hop}")
    if win_len < 2 or win_len % 2:
        raise InvalidFrameError(f"win_len must be even and >= 2, got {win_len}")
    if hop > win_len:
        raise InvalidFrameError(f"hop ({hop}) must not exceed win_len ({win_len})")


def num_frames(length: int, win_len: int, hop: int) -> int:
    padded_len = length + 2 * (win_len // 2)
    return (padded_len - win_len) // hop + 1


def stft(buf: AudioBuffer, win_len: int = WIN_LEN, hop: int = HOP) -> Spectrogram:
    """中心对齐的短时傅里叶变换（两端各补 win_len/2 个零）"""
    _check_geometry(win_len, hop)
    if len(buf) == 0:
        raise EmptyBufferError("cannot compute STFT of an empty buffer")

    pad = win_len // 2
    padded = np.pad(buf.samples, (pad, pad))
    n_frames = num_frames(len(buf), win_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, win_len)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * hann_window(win_len), n=win_len, axis=-1)

    return Spectrogram(
        frames=spectrum,
        win_len=win_len,
        hop=hop,
        original_len=len(buf),
        sample_rate=buf.sample_rate,
    )


def _synthesis_norm(n_frames: int, win_len: int, hop: int, original_len: int) -> Tuple[np.ndarray, int]:
    """返回保留区间上的平方窗累加和，以及补零后的缓冲长度"""
    window = hann_window(win_len)
    pad = win_len // 2
    buf_len = max((n_frames - 1) * hop + win_len, pad + original_len)
    wsum = np.zeros(buf_len)
    for t in range(n_frames):
        wsum[t * hop:t * hop + win_len] += window ** 2
    retained = wsum[pad:pad + original_len]
    if np.any(retained <= 1e-12):
        raise IstftError(
            f"squared-window sum vanishes inside the signal (win_len={win_len}, hop={hop})"
        )
    return retained, buf_len


def overlap_add(frames: np.ndarray, win_len: int, hop: int, original_len: int) -> np.ndarray:
    """加权重叠相加：逐帧乘窗累加，再除以平方窗累加和，去掉中心补零"""
    n_frames = frames.shape[0]
    retained, buf_len = _synthesis_norm(n_frames, win_len, hop, original_len)
    window = hann_window(win_len)
    out = np.zeros(buf_len)
    for t in range(n_frames):
        out[t * hop:t * hop + win_len] += frames[t] * window
    pad = win_len // 2
    return out[pad:pad + original_len] / retained


def overlap_add_adjoint(grad: np.ndarray, n_frames: int, win_len: int, hop: int) -> np.ndarray:
    """overlap_add 的伴随算子（用于 iSTFT 反向传播）"""
    original_len = grad.shape[0]
    retained, buf_len = _synthesis_norm(n_frames, win_len, hop, original_len)
    window = hann_window(win_len)
    pad = win_len // 2
    full = np.zeros(buf_len)
    full[pad:pad + original_len] = grad / retained
    frames = np.lib.stride_tricks.sliding_window_view(full, win_len)[::hop][:n_frames]
    return frames * window


def istft(spec: Spectrogram) -> AudioBuffer:
    time_frames = np.fft.irfft(spec.frames, n=spec.win_len, axis=-1)
    samples = overlap_add(time_frames, spec.win_len, spec.hop, spec.original_len)
    return AudioBuffer(samples, spec.sample_rate)


def mag_phase(spec: Spectrogram) -> MagPhase:
    magnitude = np.abs(spec.frames)
    phase = np.angle(spec.frames)
    # 相位取 (-pi, pi]；零幅度的相位约定为 0
    phase = np.where(phase <= -np.pi, np.pi, phase)
    phase = np.where(magnitude == 0.0, 0.0, phase)
    return MagPhase(magnitude=magnitude, phase=phase)


def recombine(magnitude: np.ndarray, phase: np.ndarray, like: Spectrogram) -> Spectrogram:
    """幅度 + 相位 -> 复数谱，几何信息取自 like"""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape or magnitude.shape != like.frames.shape:
        raise ShapeMismatchError(
            f"magnitude {magnitude.shape}, phase {phase.shape} and spectrogram "
            f"{like.frames.shape} must agree"
        )
    frames = magnitude * np.cos(phase) + 1j * (magnitude * np.sin(phase))
    return Spectrogram(
        frames=frames,
        win_len=like.win_len,
        hop=like.hop,
        original_len=like.original_len,
        sample_rate=like.sample_rate,
    )


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """多相有理重采样，输出长度 round(len * target / source)"""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise AudioError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return buf.copy()

    g = gcd(target_rate, buf.sample_rate)
    up, down = target_rate // g, buf.sample_rate // g
    out_len = int(round(len(buf) * target_rate / buf.sample_rate))
    if len(buf) == 0:
        return AudioBuffer(np.zeros(0), target_rate)

    y = resample_poly(buf.samples, up, down)
    if y.shape[0] >= out_len:
        y = y[:out_len]
    else:
        y = np.pad(y, (0, out_len - y.shape[0]))
    logging.debug(f"resampled {len(buf)} samples {buf.sample_rate} Hz -> {out_len} samples {target_rate} Hz")
    return AudioBuffer(y, target_rate)
