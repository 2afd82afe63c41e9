"""Spectral front end: STFT analysis/synthesis, invertible spectrogram
feature maps, and the log-power / Mel grids used by the spectral losses.

Conventions, fixed across the package:

* Periodic Hann window for analysis and synthesis; overlap-add divides by
  the summed squared window.
* Center framing: the signal is padded with ``window // 2`` reflected
  samples on each side, giving ``T = len(x) // hop + 1`` frames.
* Natural log everywhere, floored at ``LOG_EPS`` so silence stays finite.
* Phase angles live in (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .errors import ConfigurationError, InvalidInputError, NumericError

# Floor for magnitudes (and additive guard for power grids) before the log.
LOG_EPS = 1e-5

MODE_TIME = "time"
MODE_MAG_ANGLE = "mag_angle"
MODE_MAG_PHASE = "mag_phase"
FEATURE_MODES = (MODE_TIME, MODE_MAG_ANGLE, MODE_MAG_PHASE)

# Channel count of each feature-map mode.
MODE_CHANNELS = {MODE_TIME: 1, MODE_MAG_ANGLE: 2, MODE_MAG_PHASE: 3}

# Scale indices of the multi-resolution loss banks: window 2**i, hop 2**i / 4.
LOSS_SCALES = tuple(range(5, 12))

_TINY = np.finfo(np.float64).tiny


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window of the given length."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)


@dataclass
class ComplexSpectrogram:
    """One-sided complex STFT frames plus the analysis geometry.

    ``frames`` has shape (T, F) with F = window_size // 2 + 1.
    """

    frames: np.ndarray
    window_size: int
    hop_size: int

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise InvalidInputError(f"expected (T, F) frames, got shape {frames.shape}")
        if not np.iscomplexobj(frames):
            frames = frames.astype(np.complex128)
        expected_bins = self.window_size // 2 + 1
        if frames.shape[1] != expected_bins:
            raise InvalidInputError(
                f"got {frames.shape[1]} bins for window {self.window_size}, "
                f"expected {expected_bins}"
            )
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


@dataclass
class FeatureMap:
    """Real-valued spectrogram features, shape (channels, T, F).

    ``mag_angle`` is (log-magnitude, phase angle); ``mag_phase`` is
    (log-magnitude, cos phase, sin phase).  The analysis geometry rides
    along so the map can be inverted back to a spectrogram.
    """

    mode: str
    data: np.ndarray
    window_size: int
    hop_size: int

    def __post_init__(self):
        if self.mode not in (MODE_MAG_ANGLE, MODE_MAG_PHASE):
            raise InvalidInputError(f"unknown feature mode {self.mode!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != MODE_CHANNELS[self.mode]:
            raise InvalidInputError(
                f"mode {self.mode!r} expects shape ({MODE_CHANNELS[self.mode]}, T, F), "
                f"got {data.shape}"
            )
        self.data = data

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


def frame_count(num_samples: int, hop_size: int) -> int:
    """Frame count produced by center-padded analysis."""
    return num_samples // hop_size + 1


def stft(audio: AudioBuffer, window_size: int = 512, hop_size: int = 160) -> ComplexSpectrogram:
    """Short-time Fourier transform with center reflect padding.

    Frame t covers padded samples [t * hop, t * hop + window), so frame t is
    centered on input sample t * hop and T = len(x) // hop + 1.
    """
    if window_size <= 0 or window_size % 2 != 0:
        raise InvalidInputError(f"window size must be a positive even number, got {window_size}")
    if not 0 < hop_size <= window_size:
        raise InvalidInputError(
            f"hop size must be in (0, window_size], got hop {hop_size} window {window_size}"
        )
    x = audio.samples
    if len(x) == 0:
        raise InvalidInputError("cannot analyze an empty waveform")
    pad = window_size // 2
    padded = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.full(2 * pad + 1, x[0])
    n_frames = frame_count(len(x), hop_size)
    window = hann_window(window_size)
    offsets = np.arange(n_frames) * hop_size
    frames = padded[offsets[:, None] + np.arange(window_size)[None, :]]
    spectrum = np.fft.rfft(frames * window, axis=1)
    return ComplexSpectrogram(spectrum, window_size, hop_size)


def istft(spec: ComplexSpectrogram, length: int, sample_rate: int = 16000) -> AudioBuffer:
    """Overlap-add inverse STFT, normalized by the summed squared window.

    ``length`` selects how many samples to return, counted from the center
    of frame 0; it may not exceed the synthesizable span
    ``(T - 1) * hop + window // 2``.
    """
    window_size, hop_size = spec.window_size, spec.hop_size
    n_frames = spec.num_frames
    if n_frames == 0:
        raise InvalidInputError("cannot synthesize from an empty spectrogram")
    if length <= 0:
        raise InvalidInputError(f"length must be positive, got {length}")
    max_length = (n_frames - 1) * hop_size + window_size // 2
    if length > max_length:
        raise InvalidInputError(
            f"length {length} exceeds the synthesizable span {max_length} "
            f"for {n_frames} frames"
        )
    window = hann_window(window_size)
    total = window_size + (n_frames - 1) * hop_size
    synth = np.zeros(total)
    norm = np.zeros(total)
    segments = np.fft.irfft(spec.frames, n=window_size, axis=1) * window
    for t in range(n_frames):
        start = t * hop_size
        synth[start:start + window_size] += segments[t]
        norm[start:start + window_size] += window ** 2
    pad = window_size // 2
    denom = norm[pad:pad + length]
    if np.any(denom < 1e-12):
        raise NumericError(
            "overlap-add normalization vanished; window/hop combination leaves gaps"
        )
    return AudioBuffer(synth[pad:pad + length] / denom, sample_rate)


def domain_transform(spec: ComplexSpectrogram, mode: str) -> FeatureMap:
    """Turn a complex spectrogram into a real feature map.

    ``mag_angle`` stacks (log |X|, atan2(Im, Re)); ``mag_phase`` stacks
    (log |X|, Re / |X|, Im / |X|).  Magnitudes are floored at LOG_EPS before
    the log; phase channels are computed from the raw complex values.
    """
    if mode not in (MODE_MAG_ANGLE, MODE_MAG_PHASE):
        raise InvalidInputError(f"unsupported transform mode {mode!r}")
    mag = np.abs(spec.frames)
    log_mag = np.log(np.maximum(mag, LOG_EPS))
    if mode == MODE_MAG_ANGLE:
        angle = np.arctan2(spec.frames.imag, spec.frames.real)
        # atan2 maps (-0.0, negative) to -pi; fold onto the (-pi, pi] branch.
        angle = np.where(angle <= -np.pi, np.pi, angle)
        data = np.stack([log_mag, angle])
    else:
        safe = np.maximum(mag, _TINY)
        data = np.stack([log_mag, spec.frames.real / safe, spec.frames.imag / safe])
    return FeatureMap(mode, data, spec.window_size, spec.hop_size)


def domain_invert(features: FeatureMap) -> ComplexSpectrogram:
    """Invert a feature map back to a complex spectrogram.

    The magnitude is exp of channel 0 exactly.  For ``mag_phase`` the
    (cos, sin) pair is renormalized to unit length first, so perturbed
    feature maps still invert to the encoded magnitude; a zero pair falls
    back to phase 0.
    """
    mag = np.exp(features.data[0])
    if features.mode == MODE_MAG_ANGLE:
        angle = features.data[1]
        frames = mag * (np.cos(angle) + 1j * np.sin(angle))
    else:
        c_re, c_im = features.data[1], features.data[2]
        norm = np.hypot(c_re, c_im)
        zero = norm < _TINY
        norm = np.where(zero, 1.0, norm)
        frames = mag * (np.where(zero, 1.0, c_re / norm) + 1j * np.where(zero, 0.0, c_im / norm))
    return ComplexSpectrogram(frames, features.window_size, features.hop_size)


@dataclass
class SpectralBank:
    """Analysis geometry of one loss scale: window 2**i, hop 2**i / 4."""

    scale_index: int
    window_size: int
    hop_size: int
    mel_bins: int

    def __post_init__(self):
        if self.scale_index not in LOSS_SCALES:
            raise ConfigurationError(
                f"scale index {self.scale_index} outside supported range "
                f"{LOSS_SCALES[0]}..{LOSS_SCALES[-1]}"
            )
        if self.window_size != 2 ** self.scale_index:
            raise ConfigurationError(
                f"window {self.window_size} does not match scale 2**{self.scale_index}"
            )
        if self.hop_size * 4 != self.window_size:
            raise ConfigurationError(
                f"hop {self.hop_size} must be a quarter of window {self.window_size}"
            )
        if not 0 < self.mel_bins <= self.num_bins:
            raise ConfigurationError(
                f"mel_bins {self.mel_bins} must be in 1..{self.num_bins} "
                f"for window {self.window_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.window_size // 2 + 1

    @classmethod
    def for_scale(cls, scale_index: int, mel_bins: int | None = None) -> "SpectralBank":
        """Bank at scale i with the default Mel resolution: 80 bands when the
        grid has at least 128 bins, else half the bin count."""
        window = 2 ** scale_index
        bins = window // 2 + 1
        if mel_bins is None:
            mel_bins = 80 if bins >= 128 else bins // 2
        return cls(scale_index, window, window // 4, mel_bins)


def default_banks(scales=LOSS_SCALES) -> list[SpectralBank]:
    return [SpectralBank.for_scale(i) for i in scales]


def hz_to_mel(freq_hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, window_size: int, mel_bins: int) -> np.ndarray:
    """Triangular HTK-style Mel filterbank, shape (mel_bins, F).

    Band edges are spaced uniformly on the mel scale between 0 Hz and
    Nyquist and the triangles are evaluated at the FFT bin frequencies.
    When the grid is too coarse for a triangle to touch any bin, that filter
    falls back to a unit weight on the bin nearest its center so no row is
    all-zero.
    """
    num_bins = window_size // 2 + 1
    if not 0 < mel_bins <= num_bins:
        raise ConfigurationError(
            f"mel_bins {mel_bins} must be in 1..{num_bins} for window {window_size}"
        )
    edges_mel = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2)
    bin_mel = hz_to_mel(np.arange(num_bins) * sample_rate / window_size)
    left, center, right = edges_mel[:-2], edges_mel[1:-1], edges_mel[2:]
    up = (bin_mel[None, :] - left[:, None]) / (center[:, None] - left[:, None])
    down = (right[:, None] - bin_mel[None, :]) / (right[:, None] - center[:, None])
    bank = np.maximum(0.0, np.minimum(up, down))
    center_hz = mel_to_hz(center)
    for m in range(mel_bins):
        if not bank[m].any():
            nearest = int(np.argmin(np.abs(np.arange(num_bins) * sample_rate / window_size
                                           - center_hz[m])))
            bank[m, nearest] = 1.0
    return bank


def log_power_spectrum(audio: AudioBuffer, bank: SpectralBank) -> np.ndarray:
    """log(|STFT|^2 + LOG_EPS) on the bank's grid, shape (T, F)."""
    spec = stft(audio, bank.window_size, bank.hop_size)
    return np.log(np.abs(spec.frames) ** 2 + LOG_EPS)


def mel_spectrum(audio: AudioBuffer, bank: SpectralBank) -> np.ndarray:
    """Log-compressed Mel energies on the bank's grid, shape (T, mel_bins)."""
    spec = stft(audio, bank.window_size, bank.hop_size)
    power = np.abs(spec.frames) ** 2
    filters = mel_filterbank(audio.sample_rate, bank.window_size, bank.mel_bins)
    return np.log(power @ filters.T + LOG_EPS)
