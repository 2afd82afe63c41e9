import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcodec.audio import AudioBuffer
from fdcodec.dsp import (
    LOG_EPS,
    LOSS_SCALES,
    MODE_MAG_ANGLE,
    MODE_MAG_PHASE,
    ComplexSpectrogram,
    FeatureMap,
    SpectralBank,
    default_banks,
    domain_invert,
    domain_transform,
    frame_count,
    hann_window,
    hz_to_mel,
    istft,
    log_power_spectrum,
    mel_filterbank,
    mel_spectrum,
    mel_to_hz,
    stft,
)
from fdcodec.errors import ConfigurationError, InvalidInputError, NumericError


def naive_windowed_dft(frame, window):
    """Direct O(N^2) one-sided DFT, the oracle for the fft-based path."""
    n = len(frame)
    x = frame * window
    bins = n // 2 + 1
    out = np.zeros(bins, dtype=np.complex128)
    for k in range(bins):
        out[k] = np.sum(x * np.exp(-2j * np.pi * k * np.arange(n) / n))
    return out


def snr_db(reference, estimate):
    err = reference - estimate
    return 10.0 * np.log10(np.sum(reference ** 2) / max(np.sum(err ** 2), 1e-30))


def test_frame_count_examples():
    assert frame_count(51200, 160) == 321
    assert frame_count(160, 160) == 2
    assert frame_count(1, 160) == 1


def test_stft_shape_and_bins(noise):
    spec = stft(noise(seconds=3.2), 512, 160)
    assert spec.frames.shape == (321, 257)
    assert spec.window_size == 512 and spec.hop_size == 160


def test_stft_zero_signal():
    buf = AudioBuffer(samples=np.zeros(4000), sample_rate=16000)
    assert np.all(stft(buf).frames == 0)


def test_stft_matches_naive_dft(rng):
    # interior frame against the direct-summation oracle
    x = rng.standard_normal(2048)
    buf = AudioBuffer(samples=x, sample_rate=16000)
    spec = stft(buf, 512, 160)
    win = hann_window(512)
    m = 4  # frame centered at 640, fully interior
    start = m * 160 - 256
    oracle = naive_windowed_dft(x[start:start + 512], win)
    assert np.max(np.abs(spec.frames[m] - oracle)) < 1e-9


def test_stft_bin_center_cosine_concentration():
    # bin-center tone: the window's main lobe (k-1, k, k+1) carries the
    # frame energy and the peak sits on bin k
    k = 20
    sr, win = 16000, 512
    t = np.arange(sr) / sr
    buf = AudioBuffer(samples=np.cos(2 * np.pi * (k * sr / win) * t), sample_rate=sr)
    spec = stft(buf, win, 160)
    for m in range(4, spec.num_frames - 4):
        power = np.abs(spec.frames[m]) ** 2
        lobe = power[k - 1] + power[k] + power[k + 1]
        assert lobe >= 0.99 * power.sum()
        assert np.argmax(power) == k


def test_stft_linearity(rng):
    x = rng.standard_normal(3000)
    y = rng.standard_normal(3000)
    a, b = 0.7, -1.3
    mix = stft(AudioBuffer(samples=a * x + b * y, sample_rate=16000))
    sx = stft(AudioBuffer(samples=x, sample_rate=16000))
    sy = stft(AudioBuffer(samples=y, sample_rate=16000))
    assert np.allclose(mix.frames, a * sx.frames + b * sy.frames, atol=1e-10)


def test_istft_round_trip_snr(rng):
    for trial in range(5):
        x = np.random.default_rng(trial).standard_normal(51200)
        buf = AudioBuffer(samples=x, sample_rate=16000)
        out = istft(stft(buf), length=len(x))
        assert len(out) == len(x)
        interior = slice(512, len(x) - 512)
        assert snr_db(x[interior], out.samples[interior]) > 60.0


def test_istft_sine_correlation(tone):
    buf = tone(freq=440.0, seconds=1.0)
    out = istft(stft(buf), length=len(buf))
    c = np.corrcoef(buf.samples, out.samples)[0, 1]
    assert c > 0.999


def test_istft_zero_spectrogram():
    spec = ComplexSpectrogram(np.zeros((50, 257), dtype=np.complex128), 512, 160)
    out = istft(spec, length=2000)
    assert np.all(out.samples == 0)


def test_istft_length_bound():
    spec = ComplexSpectrogram(np.zeros((10, 257), dtype=np.complex128), 512, 160)
    limit = 9 * 160 + 256
    assert len(istft(spec, length=limit)) == limit
    with pytest.raises(InvalidInputError):
        istft(spec, length=limit + 1)


def test_istft_zero_denominator():
    # hop == window leaves the first sample of each frame covered only by
    # the window's zero endpoint
    spec = ComplexSpectrogram(np.ones((4, 33), dtype=np.complex128), 64, 64)
    with pytest.raises(NumericError):
        istft(spec, length=64)


def test_domain_transform_unit_real():
    spec = ComplexSpectrogram(np.full((1, 257), 1 + 0j), 512, 160)
    fm = domain_transform(spec, MODE_MAG_PHASE)
    assert fm.data.shape == (3, 1, 257)
    assert np.allclose(fm.data[0], 0.0)
    assert np.allclose(fm.data[1], 1.0)
    assert np.allclose(fm.data[2], 0.0)


def test_domain_transform_pure_imaginary():
    spec = ComplexSpectrogram(np.full((1, 257), 2j), 512, 160)
    fm = domain_transform(spec, MODE_MAG_ANGLE)
    assert fm.data.shape == (2, 1, 257)
    assert np.allclose(fm.data[0], np.log(2.0))
    assert np.allclose(fm.data[1], np.pi / 2)


def test_domain_invert_examples():
    fm = FeatureMap(MODE_MAG_PHASE, np.zeros((3, 1, 5)), 8, 2)
    fm.data[1] = 1.0
    assert np.allclose(domain_invert(fm).frames, 1 + 0j)
    fm2 = FeatureMap(MODE_MAG_ANGLE, np.zeros((2, 1, 5)), 8, 2)
    fm2.data[0] = np.log(2.0)
    fm2.data[1] = np.pi / 2
    assert np.allclose(domain_invert(fm2).frames, 2j)


def test_domain_invert_renormalizes_phase_pair():
    # decoder outputs need not sit on the unit circle; magnitude must still
    # equal exp(mag) exactly
    fm = FeatureMap(MODE_MAG_PHASE, np.zeros((3, 2, 8)), 14, 4)
    fm.data[0] = 0.4
    fm.data[1] = 1.3 * np.cos(0.7)
    fm.data[2] = 1.3 * np.sin(0.7)
    spec = domain_invert(fm)
    assert np.allclose(np.abs(spec.frames), np.exp(0.4), rtol=1e-12)
    assert np.allclose(np.angle(spec.frames), 0.7, rtol=1e-12)


def test_domain_invert_zero_phase_pair_defaults_to_zero():
    fm = FeatureMap(MODE_MAG_PHASE, np.zeros((3, 1, 4)), 6, 2)
    fm.data[0] = np.log(3.0)
    spec = domain_invert(fm)
    assert np.allclose(spec.frames, 3.0 + 0j)


@pytest.mark.parametrize("mode", [MODE_MAG_ANGLE, MODE_MAG_PHASE])
def test_domain_round_trip(mode, rng):
    for _ in range(20):
        frames = rng.standard_normal((7, 257)) + 1j * rng.standard_normal((7, 257))
        spec = ComplexSpectrogram(frames, 512, 160)
        back = domain_invert(domain_transform(spec, mode))
        mask = np.abs(frames) > 1e-6
        assert np.max(np.abs(back.frames[mask] - frames[mask])) < 1e-5


def test_mag_phase_unit_circle(rng):
    frames = rng.standard_normal((5, 257)) + 1j * rng.standard_normal((5, 257))
    fm = domain_transform(ComplexSpectrogram(frames, 512, 160), MODE_MAG_PHASE)
    norm = fm.data[1] ** 2 + fm.data[2] ** 2
    mask = np.abs(frames) > LOG_EPS
    assert np.allclose(norm[mask], 1.0, atol=1e-6)


def test_angle_range_half_open(rng):
    frames = -np.abs(rng.standard_normal((3, 257))) + 0j  # negative real axis
    fm = domain_transform(ComplexSpectrogram(frames, 512, 160), MODE_MAG_ANGLE)
    assert np.all(fm.data[1] > -np.pi)
    assert np.all(fm.data[1] <= np.pi)


def test_hz_mel_round_trip():
    freqs = np.array([0.0, 100.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(freqs)), freqs)
    assert hz_to_mel(1000.0) == pytest.approx(2595.0 * np.log10(1.0 + 1000.0 / 700.0))


def test_mel_filterbank_no_zero_rows():
    for i in LOSS_SCALES:
        bank = SpectralBank.for_scale(i)
        fb = mel_filterbank(16000, bank.window_size, bank.mel_bins)
        assert fb.shape == (bank.mel_bins, bank.num_bins)
        assert np.all(fb.sum(axis=1) > 0)


def test_mel_bins_rule():
    assert SpectralBank.for_scale(5).mel_bins == 8      # 17 bins -> 8
    assert SpectralBank.for_scale(7).mel_bins == 32     # 65 bins -> 32
    assert SpectralBank.for_scale(8).mel_bins == 80     # 129 bins -> 80
    assert SpectralBank.for_scale(11).mel_bins == 80


def test_mel_bins_exceeding_grid_rejected():
    with pytest.raises(ConfigurationError):
        mel_filterbank(16000, 32, 18)
    with pytest.raises(ConfigurationError):
        SpectralBank(5, 32, 8, 40)


def test_log_power_zero_signal():
    buf = AudioBuffer(samples=np.zeros(4096), sample_rate=16000)
    bank = SpectralBank.for_scale(8)
    grid = log_power_spectrum(buf, bank)
    assert np.allclose(grid, np.log(LOG_EPS))
    assert np.allclose(mel_spectrum(buf, bank), np.log(LOG_EPS))


def test_log_power_scaling_law(rng):
    # doubling amplitude adds log 4 to every log-power bin where the floor
    # is negligible
    x = rng.standard_normal(8192)
    bank = SpectralBank.for_scale(9)
    g1 = log_power_spectrum(AudioBuffer(samples=x, sample_rate=16000), bank)
    g2 = log_power_spectrum(AudioBuffer(samples=2 * x, sample_rate=16000), bank)
    mask = g1 > np.log(LOG_EPS) + 12.0
    assert mask.any()
    assert np.allclose((g2 - g1)[mask], np.log(4.0), atol=1e-4)


def test_mel_all_ones_power_equals_weight_sums():
    # with unit power in every bin each filter returns its own weight sum
    bank = SpectralBank.for_scale(8)
    fb = mel_filterbank(16000, bank.window_size, bank.mel_bins)
    power = np.ones((3, bank.num_bins))
    out = np.log(power @ fb.T + LOG_EPS)
    expected = np.log(fb.sum(axis=1) + LOG_EPS)
    assert np.allclose(out, expected[None, :])


def test_mel_tone_hits_matching_band(tone):
    buf = tone(freq=1000.0, seconds=1.0)
    bank = SpectralBank.for_scale(11)
    grid = mel_spectrum(buf, bank)
    band = int(np.argmax(grid.mean(axis=0)))
    fb = mel_filterbank(16000, bank.window_size, bank.mel_bins)
    freqs = np.arange(bank.num_bins) * 16000.0 / bank.window_size
    centers = (fb * freqs[None, :]).sum(axis=1) / fb.sum(axis=1)
    # winning band's weighted center frequency brackets 1 kHz
    assert abs(centers[band] - 1000.0) < 120.0


def test_default_banks_cover_all_scales():
    banks = default_banks()
    assert [b.scale_index for b in banks] == list(LOSS_SCALES)
    assert [b.window_size for b in banks] == [2 ** i for i in LOSS_SCALES]
    assert all(b.window_size == 4 * b.hop_size for b in banks)


@given(st.integers(min_value=0, max_value=2 ** 31), st.integers(min_value=1, max_value=1024))
def test_frame_count_is_floor_plus_one(n, hop):
    assert frame_count(n, hop) == n // hop + 1
