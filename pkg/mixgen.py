"""
带噪语音合成：按精确信噪比混合纯净语音与噪声，并生成按说话人划分的清单
"""

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from audio_dsp import AudioBuffer, read_wav, resample
from config import MASTER_SEED, PEAK_TARGET, SAMPLE_RATE, SNR_CAP_DB, SNR_GRID, SPLIT_NAMES, SPLIT_RATIOS


class MixError(ValueError):
    pass


class SilentSignalError(MixError):
    pass


class SampleRateMismatchError(MixError):
    pass


class LengthMismatchError(MixError):
    pass


class EmptyPoolError(MixError):
    pass


class SplitRatioError(MixError):
    pass


class ManifestFormatError(MixError):
    pass


MANIFEST_FIELDS = [
    "clean_id",
    "noise_id",
    "noise_tag",
    "target_snr_db",
    "split",
    "seed",
    "noise_offset",
    "rescale_gain",
]


@dataclass
class ManifestEntry:
    clean_id: str
    noise_id: str
    noise_tag: str
    target_snr_db: float
    split: str
    seed: int
    noise_offset: int
    rescale_gain: float = 1.0
    index: int = -1  # 清单中的行号（0 起），不写入文件


@dataclass
class DatasetSpec:
    clean_dir: str
    noise_dir: str
    snr_grid: List[float] = field(default_factory=lambda: list(SNR_GRID))
    splits: Tuple[float, float, float] = SPLIT_RATIOS
    pairs_per_clean: int = 0  # 0 表示使用全部 (noise, snr) 组合
    master_seed: int = MASTER_SEED

    def validate(self) -> "DatasetSpec":
        if not self.snr_grid:
            raise MixError("snr_grid must not be empty")
        if len(self.splits) != 3 or any(r < 0 for r in self.splits):
            raise SplitRatioError(f"need three non-negative split ratios, got {self.splits}")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise SplitRatioError(f"split ratios must sum to 1, got {sum(self.splits):.6f}")
        if self.pairs_per_clean < 0:
            raise MixError(f"pairs_per_clean must be >= 0, got {self.pairs_per_clean}")
        return self


@dataclass
class Mixture:
    mixture: AudioBuffer
    clean: AudioBuffer  # 纯净参考（可能已被 g 缩放）
    noise: AudioBuffer  # 噪声分量（已乘 a，可能已被 g 缩放）
    noise_gain: float
    rescale_gain: float


def signal_power(buf: AudioBuffer) -> float:
    if len(buf) == 0:
        raise MixError("cannot compute power of an empty buffer")
    return float(np.mean(buf.samples ** 2))


def gain_for_snr(clean: AudioBuffer, noise: AudioBuffer, target_snr_db: float) -> float:
    """a = sqrt(P_clean / (P_noise * 10^(snr/10)))"""
    p_clean = signal_power(clean)
    p_noise = signal_power(noise)
    if p_clean <= 0.0:
        raise SilentSignalError("clean signal is silent; SNR undefined")
    if p_noise <= 0.0:
        raise SilentSignalError("noise signal is silent; SNR undefined")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0))))


def tile_noise(noise: np.ndarray, length: int, offset: int) -> np.ndarray:
    """从 offset 开始循环平铺/截取噪声到指定长度"""
    idx = (int(offset) + np.arange(length)) % noise.shape[0]
    return noise[idx]


def mix(clean: AudioBuffer, noise: AudioBuffer, target_snr_db: float, noise_offset: int = 0) -> Mixture:
    if clean.sample_rate != noise.sample_rate:
        raise SampleRateMismatchError(
            f"clean is {clean.sample_rate} Hz but noise is {noise.sample_rate} Hz"
        )
    if len(noise) == 0:
        raise MixError("noise buffer is empty")

    tiled = AudioBuffer(tile_noise(noise.samples, len(clean), noise_offset), clean.sample_rate)
    a = gain_for_snr(clean, tiled, target_snr_db)
    noise_part = a * tiled.samples
    clean_part = clean.samples
    mixture = clean_part + noise_part

    # 峰值超过 1 时三者按同一因子缩放，保持信噪比不变
    g = 1.0
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        g = PEAK_TARGET / peak
        clean_part = g * clean_part
        noise_part = g * noise_part
        mixture = clean_part + noise_part

    return Mixture(
        mixture=AudioBuffer(mixture, clean.sample_rate),
        clean=AudioBuffer(clean_part, clean.sample_rate),
        noise=AudioBuffer(noise_part, clean.sample_rate),
        noise_gain=a,
        rescale_gain=g,
    )


def measured_snr(reference: AudioBuffer, distortion: AudioBuffer) -> float:
    """10*log10(sum ref^2 / (sum dist^2 + 1e-12))，上限 +100 dB"""
    if len(reference) != len(distortion):
        raise LengthMismatchError(
            f"reference has {len(reference)} samples, distortion has {len(distortion)}"
        )
    ref_energy = float(np.sum(reference.samples ** 2))
    if ref_energy <= 0.0:
        raise SilentSignalError("reference signal is silent; SNR undefined")
    dist_energy = float(np.sum(distortion.samples ** 2))
    return min(SNR_CAP_DB, 10.0 * np.log10(ref_energy / (dist_energy + 1e-12)))


# ----------------------------------------------------------------------
# 清单
# ----------------------------------------------------------------------
def hash64(*parts) -> int:
    """可拆分的种子规则：BLAKE2b-64(master_seed | clean_id | noise_id | snr)"""
    text = "|".join(f"{p:.6f}" if isinstance(p, float) else str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def list_wavs(directory: str) -> List[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise EmptyPoolError(f"directory not found: {directory}")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav")


def speaker_of(path: Path, root: Path) -> str:
    rel = path.relative_to(root)
    return rel.parts[-2] if len(rel.parts) > 1 else path.stem


def noise_tag_of(path: Path, root: Path) -> str:
    rel = path.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[-2]
    tag = re.split(r"[_\-\s\d]+", path.stem)[0]
    return tag or path.stem


class AudioCache:
    """按路径缓存已重采样到项目采样率的音频"""

    def __init__(self, sample_rate: int = SAMPLE_RATE):
        self.sample_rate = sample_rate
        self._buffers: Dict[str, AudioBuffer] = {}

    def get(self, path: str) -> AudioBuffer:
        if path not in self._buffers:
            buf = read_wav(path)
            if buf.sample_rate != self.sample_rate:
                logging.info(f"resampling {path} from {buf.sample_rate} Hz to {self.sample_rate} Hz")
                buf = resample(buf, self.sample_rate)
            self._buffers[path] = buf
        return self._buffers[path]


def synthesize_entry(entry: ManifestEntry, cache: Optional[AudioCache] = None) -> Mixture:
    cache = cache or AudioCache()
    clean = cache.get(entry.clean_id)
    noise = cache.get(entry.noise_id)
    return mix(clean, noise, entry.target_snr_db, entry.noise_offset)


def _assign_splits(speaker_sizes: Dict[str, int], ratios: Sequence[float], seed: int) -> Dict[str, str]:
    """按说话人划分：打乱后按条目累计位置的中点落入哪个比例区间"""
    speakers = sorted(speaker_sizes)
    order = np.random.default_rng(seed).permutation(len(speakers))
    total = sum(speaker_sizes.values())
    bounds = np.cumsum(ratios)
    assignment = {}
    consumed = 0
    for i in order:
        spk = speakers[i]
        n = speaker_sizes[spk]
        midpoint = (consumed + n / 2.0) / total
        k = min(int(np.searchsorted(bounds, midpoint, side="right")), len(SPLIT_NAMES) - 1)
        assignment[spk] = SPLIT_NAMES[k]
        consumed += n
    return assignment


def build_manifest(spec: DatasetSpec, cache: Optional[AudioCache] = None) -> List[ManifestEntry]:
    spec.validate()
    cache = cache or AudioCache()
    clean_root, noise_root = Path(spec.clean_dir), Path(spec.noise_dir)
    clean_files = list_wavs(spec.clean_dir)
    noise_files = list_wavs(spec.noise_dir)
    if not clean_files:
        raise EmptyPoolError(f"no clean WAV files under {spec.clean_dir}")
    if not noise_files:
        raise EmptyPoolError(f"no noise WAV files under {spec.noise_dir}")

    combos = [(n, float(s)) for n in noise_files for s in spec.snr_grid]
    per_clean = len(combos) if spec.pairs_per_clean == 0 else min(spec.pairs_per_clean, len(combos))

    drafts = []
    for clean_path in clean_files:
        clean_id = clean_path.as_posix()
        if per_clean == len(combos):
            chosen = combos
        else:
            rng = np.random.default_rng(hash64(spec.master_seed, clean_id))
            picks = np.sort(rng.choice(len(combos), size=per_clean, replace=False))
            chosen = [combos[i] for i in picks]
        for noise_path, snr in chosen:
            drafts.append((clean_path, noise_path, snr))

    sizes: Dict[str, int] = {}
    for clean_path, _, _ in drafts:
        spk = speaker_of(clean_path, clean_root)
        sizes[spk] = sizes.get(spk, 0) + 1
    splits = _assign_splits(sizes, spec.splits, spec.master_seed)

    entries = []
    for index, (clean_path, noise_path, snr) in enumerate(tqdm(drafts, desc="Synthesizing manifest")):
        clean_id, noise_id = clean_path.as_posix(), noise_path.as_posix()
        seed = hash64(spec.master_seed, clean_id, noise_id, snr)
        noise_len = len(cache.get(noise_id))
        offset = int(np.random.default_rng(seed).integers(0, noise_len))
        entry = ManifestEntry(
            clean_id=clean_id,
            noise_id=noise_id,
            noise_tag=noise_tag_of(noise_path, noise_root),
            target_snr_db=snr,
            split=splits[speaker_of(clean_path, clean_root)],
            seed=seed,
            noise_offset=offset,
            index=index,
        )
        entry.rescale_gain = synthesize_entry(entry, cache).rescale_gain
        entries.append(entry)

    logging.info(f"built manifest with {len(entries)} entries from {len(clean_files)} clean x {len(noise_files)} noise files")
    return entries


def split_counts(entries: Sequence[ManifestEntry]) -> Dict[str, int]:
    counts = {name: 0 for name in SPLIT_NAMES}
    for e in entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    return counts


def write_manifest(path: str, entries: Sequence[ManifestEntry], spec: DatasetSpec) -> None:
    header = json.dumps(
        {
            "clean_dir": str(spec.clean_dir),
            "noise_dir": str(spec.noise_dir),
            "snr_grid": [float(s) for s in spec.snr_grid],
            "splits": [float(r) for r in spec.splits],
            "pairs_per_clean": int(spec.pairs_per_clean),
            "master_seed": int(spec.master_seed),
        },
        sort_keys=True,
    )
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {header}\n")
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for e in entries:
            writer.writerow([
                e.clean_id,
                e.noise_id,
                e.noise_tag,
                f"{e.target_snr_db:.6f}",
                e.split,
                str(e.seed),
                str(e.noise_offset),
                f"{e.rescale_gain:.12f}",
            ])


def read_manifest(path: str) -> List[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.reader((line for line in f if not line.startswith("#")), delimiter="\t")
        for row in reader:
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestFormatError(
                    f"{path}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}: {row}"
                )
            try:
                entries.append(ManifestEntry(
                    clean_id=row[0],
                    noise_id=row[1],
                    noise_tag=row[2],
                    target_snr_db=float(row[3]),
                    split=row[4],
                    seed=int(row[5]),
                    noise_offset=int(row[6]),
                    rescale_gain=float(row[7]),
                    index=len(entries),
                ))
            except ValueError as e:
                raise ManifestFormatError(f"{path}: bad record {row}: {e}") from e
    return entries


def read_manifest_spec(path: str) -> Optional[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if first.startswith("#"):
        return json.loads(first[1:].strip())
    return None
