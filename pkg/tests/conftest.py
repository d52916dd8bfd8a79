import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目根目录到路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from audio_dsp import AudioBuffer, write_wav  # noqa: E402

SR = 16000


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def speech_like(n: int, seed: int, sr: int = SR, amplitude: float = 0.3) -> np.ndarray:
    """带音节包络的谐波信号，代替真实语音"""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 220.0)
    x = sum(np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
    envelope = 0.5 * (1.0 - np.cos(2 * np.pi * rng.uniform(3.0, 5.0) * t))
    x = x * envelope
    return amplitude * x / np.max(np.abs(x))


def white_noise(n: int, seed: int, amplitude: float = 0.2) -> np.ndarray:
    return amplitude * np.random.default_rng(seed).standard_normal(n)


def hum_noise(n: int, seed: int, sr: int = SR) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sr
    return 0.2 * np.sin(2 * np.pi * 50.0 * t) + 0.1 * np.sin(2 * np.pi * 150.0 * t) + 0.02 * rng.standard_normal(n)


@pytest.fixture
def corpus(tmp_path):
    """10 个说话人各 1 条 1 秒语音，2 种噪声（babble_01 为白噪声，hum_01 为工频声）"""
    clean_dir = tmp_path / "clean"
    noise_dir = tmp_path / "noise"
    for i in range(10):
        spk = clean_dir / f"spk{i:02d}"
        spk.mkdir(parents=True)
        write_wav(str(spk / "utt0.wav"), AudioBuffer(speech_like(SR, seed=i), SR))
    noise_dir.mkdir()
    write_wav(str(noise_dir / "babble_01.wav"), AudioBuffer(white_noise(11200, seed=100), SR))
    write_wav(str(noise_dir / "hum_01.wav"), AudioBuffer(hum_noise(11200, seed=101), SR))
    return clean_dir, noise_dir


@pytest.fixture
def manifest_path(corpus, tmp_path):
    from mixgen import DatasetSpec, build_manifest, write_manifest

    clean_dir, noise_dir = corpus
    spec = DatasetSpec(clean_dir=str(clean_dir), noise_dir=str(noise_dir))
    path = tmp_path / "manifest.tsv"
    write_manifest(str(path), build_manifest(spec), spec)
    return path
