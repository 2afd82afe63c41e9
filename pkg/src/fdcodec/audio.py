"""Mono audio buffers, 16-bit PCM WAV I/O, and RMS level normalization."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

DEFAULT_SAMPLE_RATE = 16000

# Below this RMS the signal counts as silence and normalization is a no-op.
SILENCE_RMS = 1e-8

_PCM_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """A mono waveform with its sampling rate.

    Samples are float64 with nominal range [-1, 1]; values outside the range
    are carried through untouched and only clipped when written to PCM.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(
                f"expected a mono 1-D waveform, got shape {samples.shape}"
            )
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate

    def rms(self) -> float:
        """Root-mean-square level; 0.0 for an empty buffer."""
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))


def rms_normalize(audio: AudioBuffer, target_rms: float = 0.1) -> tuple[AudioBuffer, float]:
    """Scale a waveform to a target RMS level.

    Returns the normalized buffer and the gain such that
    ``gain * normalized.samples`` restores the input to within one
    floating-point rounding step per sample (bit-exact when the gain is a
    power of two).  Near-silent input (RMS below ``SILENCE_RMS``) is
    returned unchanged with gain 1.0 so that silence is never blown up to
    full scale.
    """
    if len(audio) == 0:
        raise InvalidInputError("cannot normalize an empty waveform")
    if target_rms <= 0:
        raise InvalidInputError(f"target RMS must be positive, got {target_rms}")
    level = audio.rms()
    if level < SILENCE_RMS:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate), 1.0
    gain = level / target_rms
    return AudioBuffer(audio.samples / gain, audio.sample_rate), gain


def read_wav(path, require_rate: int | None = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Read a 16-bit PCM WAV file as a mono AudioBuffer.

    Stereo input is downmixed by channel averaging.  Compressed WAV, sample
    widths other than 16 bits, and more than two channels are rejected, as is
    any rate other than ``require_rate`` (pass None to accept any rate).
    """
    with wave.open(str(path), "rb") as fh:
        if fh.getcomptype() != "NONE":
            raise InvalidInputError(f"{path}: compressed WAV is not supported")
        if fh.getsampwidth() != 2:
            raise InvalidInputError(
                f"{path}: only 16-bit PCM is supported, got {8 * fh.getsampwidth()}-bit"
            )
        channels = fh.getnchannels()
        if channels not in (1, 2):
            raise InvalidInputError(f"{path}: expected mono or stereo, got {channels} channels")
        rate = fh.getframerate()
        if require_rate is not None and rate != require_rate:
            raise InvalidInputError(
                f"{path}: sample rate {rate} Hz is not supported, expected {require_rate} Hz"
            )
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    if channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioBuffer(data, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    """Write an AudioBuffer as mono 16-bit PCM, clipping to [-1, 1]."""
    clipped = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(clipped * (_PCM_SCALE - 1)).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())
