"""
客观评测：SNR、STOI，以及按清单划分批量评测与分组统计
"""

import csv
import logging
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pystoi import stoi as pystoi_stoi
from tqdm import tqdm

from audio_dsp import AudioBuffer
from blockformer import EnhancerModel, forward
from config import EVAL_WORKERS, SAMPLE_RATE, SNR_BIN_RANGE, SNR_BIN_WIDTH, STOI_EXTENDED
from mixgen import AudioCache, ManifestEntry, measured_snr, synthesize_entry
from training import EmptySplitError

EVAL_FIELDS = [
    "entry_id",
    "noise_tag",
    "input_snr_db",
    "output_snr_db",
    "snr_improvement_db",
    "stoi_in",
    "stoi_out",
]
SUMMARY_METRICS = ["input_snr_db", "output_snr_db", "snr_improvement_db", "stoi_in", "stoi_out"]
SUMMARY_FIELDS = ["group", "key", "metric", "count", "mean", "min", "q1", "median", "q3", "max"]

# warnings.catch_warnings 修改的是全局状态
_stoi_lock = threading.Lock()


class MetricError(ValueError):
    pass


class StoiTooShortError(MetricError):
    pass


@dataclass
class EvalRow:
    entry_id: int
    noise_tag: str
    input_snr_db: float
    output_snr_db: float
    stoi_in: float
    stoi_out: float

    @property
    def snr_improvement_db(self) -> float:
        return self.output_snr_db - self.input_snr_db


@dataclass
class EvalReport:
    rows: List[EvalRow]
    summary: pd.DataFrame


def _check_pair(clean: AudioBuffer, est: AudioBuffer) -> None:
    if len(clean) != len(est):
        raise MetricError(f"clean has {len(clean)} samples, estimate has {len(est)}")
    if clean.sample_rate != est.sample_rate:
        raise MetricError(f"clean is {clean.sample_rate} Hz, estimate is {est.sample_rate} Hz")


def snr_metric(clean: AudioBuffer, est: AudioBuffer) -> float:
    """10*log10(sum clean^2 / (sum (clean - est)^2 + 1e-12))，上限 +100 dB"""
    _check_pair(clean, est)
    return measured_snr(clean, AudioBuffer(clean.samples - est.samples, clean.sample_rate))


def stoi(clean: AudioBuffer, est: AudioBuffer) -> float:
    """短时客观可懂度；去除静音帧后不足 384 ms 时报错而不是返回占位值"""
    _check_pair(clean, est)
    with _stoi_lock, warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        score = pystoi_stoi(clean.samples, est.samples, clean.sample_rate, extended=STOI_EXTENDED)
    for w in caught:
        if "Not enough STFT frames" in str(w.message):
            raise StoiTooShortError(
                f"signal too short for STOI after silence removal ({len(clean)} samples at {clean.sample_rate} Hz)"
            )
    return float(score)


def snr_bin(snr_db: float) -> float:
    """四舍五入到最近的 5 dB 档，再截断到 [-10, 10]"""
    lo, hi = SNR_BIN_RANGE
    centre = np.floor(snr_db / SNR_BIN_WIDTH + 0.5) * SNR_BIN_WIDTH
    return float(np.clip(centre, lo, hi)) + 0.0


def evaluate_single_entry(
    model: Optional[EnhancerModel], entry: ManifestEntry, cache: AudioCache
) -> EvalRow:
    """合成一条清单记录，可选增强后计算输入/输出 SNR 与 STOI"""
    try:
        mixture = synthesize_entry(entry, cache)
        noisy, clean = mixture.mixture, mixture.clean
        if model is None:
            est = noisy
        else:
            est, _ = forward(model, noisy)

        stoi_in = stoi(clean, noisy)
        stoi_out = stoi_in if model is None else stoi(clean, est)
        return EvalRow(
            entry_id=entry.index,
            noise_tag=entry.noise_tag,
            input_snr_db=snr_metric(clean, noisy),
            output_snr_db=snr_metric(clean, est),
            stoi_in=stoi_in,
            stoi_out=stoi_out,
        )
    except Exception as e:
        logging.error(f"evaluation failed for entry {entry.index} ({entry.clean_id} + {entry.noise_id}): {e}")
        raise


def eval_manifest(
    model: Optional[EnhancerModel],
    entries: Sequence[ManifestEntry],
    split: str,
    workers: int = EVAL_WORKERS,
    progress: bool = True,
) -> EvalReport:
    """model 为 None 时为直通（输出即输入）；结果按 entry_id 排序"""
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        raise EmptySplitError(f"split '{split}' has no entries")

    sample_rate = model.config.sample_rate if model is not None else SAMPLE_RATE
    cache = AudioCache(sample_rate)
    # 先串行加载音频，避免多个线程同时填充缓存
    for e in chosen:
        cache.get(e.clean_id)
        cache.get(e.noise_id)

    rows: List[EvalRow] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_entry = {
            executor.submit(evaluate_single_entry, model, e, cache): e
            for e in chosen
        }
        with tqdm(total=len(chosen), desc=f"Evaluating {split}", disable=not progress) as pbar:
            for future in as_completed(future_to_entry):
                rows.append(future.result())
                pbar.update(1)

    rows.sort(key=lambda r: r.entry_id)
    return EvalReport(rows=rows, summary=summarize(rows))


def rows_to_frame(rows: Sequence[EvalRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "entry_id": [r.entry_id for r in rows],
            "noise_tag": [r.noise_tag for r in rows],
            "input_snr_db": [r.input_snr_db for r in rows],
            "output_snr_db": [r.output_snr_db for r in rows],
            "snr_improvement_db": [r.snr_improvement_db for r in rows],
            "stoi_in": [r.stoi_in for r in rows],
            "stoi_out": [r.stoi_out for r in rows],
        },
        columns=EVAL_FIELDS,
    )


def _bin_label(value: float) -> str:
    return f"{value:g}"


def _group_order(key: str):
    """档位按数值排序：'babble|-5' -> ('babble', -5.0)"""
    head, _, tail = key.rpartition("|")
    try:
        return head, float(tail)
    except ValueError:
        return key, 0.0


def summarize(rows: Sequence[EvalRow]) -> pd.DataFrame:
    """箱线图统计（线性插值分位数）：全部 / 噪声类型 / 输入 SNR 档 / 两者交叉"""
    if not rows:
        return pd.DataFrame(columns=SUMMARY_FIELDS)

    df = rows_to_frame(rows)
    df["snr_bin"] = [_bin_label(snr_bin(v)) for v in df["input_snr_db"]]
    df["tag_bin"] = df["noise_tag"] + "|" + df["snr_bin"]
    df["all"] = "all"

    records = []
    for group, column in [("all", "all"), ("noise_tag", "noise_tag"), ("snr_bin", "snr_bin"), ("noise_tag+snr_bin", "tag_bin")]:
        for key in sorted(df[column].unique(), key=_group_order):
            part = df[df[column] == key]
            for metric in SUMMARY_METRICS:
                values = part[metric]
                q = values.quantile([0.0, 0.25, 0.5, 0.75, 1.0], interpolation="linear")
                records.append({
                    "group": group,
                    "key": key,
                    "metric": metric,
                    "count": int(values.shape[0]),
                    "mean": float(values.mean()),
                    "min": float(q.iloc[0]),
                    "q1": float(q.iloc[1]),
                    "median": float(q.iloc[2]),
                    "q3": float(q.iloc[3]),
                    "max": float(q.iloc[4]),
                })
    return pd.DataFrame.from_records(records, columns=SUMMARY_FIELDS)


def write_eval_rows(path: str, rows: Sequence[EvalRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(EVAL_FIELDS)
        for r in rows:
            writer.writerow([
                r.entry_id,
                r.noise_tag,
                f"{r.input_snr_db:.6f}",
                f"{r.output_snr_db:.6f}",
                f"{r.snr_improvement_db:.6f}",
                f"{r.stoi_in:.6f}",
                f"{r.stoi_out:.6f}",
            ])


def read_eval_rows(path: str) -> List[EvalRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for record in csv.DictReader(f, delimiter="\t"):
            rows.append(EvalRow(
                entry_id=int(record["entry_id"]),
                noise_tag=record["noise_tag"],
                input_snr_db=float(record["input_snr_db"]),
                output_snr_db=float(record["output_snr_db"]),
                stoi_in=float(record["stoi_in"]),
                stoi_out=float(record["stoi_out"]),
            ))
    return rows


def write_summary(path: str, summary: pd.DataFrame) -> None:
    summary.to_csv(path, sep="\t", index=False, float_format="%.6f")
