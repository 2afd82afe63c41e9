import numpy as np
import pytest

from fdcodec.audio import AudioBuffer, write_wav


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    def make(freq=440.0, seconds=1.0, rate=16000, amp=0.1):
        t = np.arange(int(round(seconds * rate))) / rate
        return AudioBuffer(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=rate)
    return make


@pytest.fixture
def noise():
    def make(seconds=1.0, rate=16000, amp=0.1, seed=0):
        gen = np.random.default_rng(seed)
        n = int(round(seconds * rate))
        return AudioBuffer(samples=amp * gen.standard_normal(n), sample_rate=rate)
    return make


@pytest.fixture
def wav_dir(tmp_path, noise):
    """Directory of short noise WAVs, returned as (path, file list)."""
    def make(count=3, seconds=1.0):
        d = tmp_path / "wavs"
        d.mkdir(exist_ok=True)
        files = []
        for i in range(count):
            p = d / f"clip{i}.wav"
            write_wav(p, noise(seconds=seconds, seed=100 + i))
            files.append(p)
        return d, files
    return make
