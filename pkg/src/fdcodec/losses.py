"""Training objectives: waveform L1, multi-resolution spectral terms,
hinge adversarial and feature-matching terms, and the commitment penalty.

All reductions are means, so every term is scale-free in the number of
frames or elements.  The L2 halves of the spectral term are RMS values
(root of the mean squared difference), keeping them on the same footing as
the L1 halves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import AudioBuffer
from .dsp import LOSS_SCALES, SpectralBank, log_power_spectrum, mel_spectrum
from .errors import InvalidInputError, NumericError
from .quantizer import QuantizerStack


@dataclass(frozen=True)
class LossWeights:
    """Weights for (time, spectral, adversarial, feature-match, commit)."""

    time: float = 1.0
    spectral: float = 1.0
    adversarial: float = 1.0 / 9.0
    feature: float = 100.0 / 9.0
    commit: float = 1.0

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.time, self.spectral, self.adversarial, self.feature, self.commit)


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class DiscriminatorOutput:
    """Scores and per-layer feature maps from a bank of discriminators.

    ``scores[k]`` is a 1-D score sequence; ``features[k][l]`` is the layer-l
    feature map of discriminator k with time as the last axis.
    """

    scores: list
    features: list

    def __post_init__(self):
        if len(self.scores) != len(self.features):
            raise InvalidInputError(
                f"{len(self.scores)} score tracks but {len(self.features)} feature tracks"
            )
        if not self.scores:
            raise InvalidInputError("need at least one discriminator")
        self.scores = [np.asarray(s, dtype=np.float64).reshape(-1) for s in self.scores]
        for k, s in enumerate(self.scores):
            if s.size == 0:
                raise InvalidInputError(f"discriminator {k} produced no scores")
        layer_counts = {len(maps) for maps in self.features}
        if len(layer_counts) != 1:
            raise InvalidInputError(f"discriminators disagree on layer count: {sorted(layer_counts)}")
        self.features = [[np.asarray(m, dtype=np.float64) for m in maps] for maps in self.features]

    @property
    def num_discriminators(self) -> int:
        return len(self.scores)

    @property
    def num_layers(self) -> int:
        return len(self.features[0])


def time_l1(reference: AudioBuffer, estimate: AudioBuffer) -> float:
    """Mean absolute waveform difference."""
    if len(reference) != len(estimate):
        raise InvalidInputError(
            f"waveform lengths differ: {len(reference)} vs {len(estimate)}"
        )
    if len(reference) == 0:
        raise InvalidInputError("cannot compare empty waveforms")
    return float(np.mean(np.abs(reference.samples - estimate.samples)))


@dataclass
class MultiScaleLoss:
    """Total spectral loss and its per-scale breakdown."""

    total: float
    per_scale: dict = field(default_factory=dict)


def multiscale_spectral(reference: AudioBuffer, estimate: AudioBuffer,
                        scales=LOSS_SCALES) -> MultiScaleLoss:
    """Average over scales of L1 + RMS differences on the log-power grid
    plus L1 + RMS differences on the log-Mel grid of each bank.
    """
    if len(reference) != len(estimate):
        raise InvalidInputError(
            f"waveform lengths differ: {len(reference)} vs {len(estimate)}"
        )
    if reference.sample_rate != estimate.sample_rate:
        raise InvalidInputError("sample rates differ")
    scales = tuple(scales)
    if not scales:
        raise InvalidInputError("need at least one scale")
    largest = 2 ** max(scales)
    if len(reference) < largest:
        raise InvalidInputError(
            f"waveform of {len(reference)} samples is shorter than the largest "
            f"analysis window {largest}"
        )
    per_scale = {}
    for i in scales:
        bank = SpectralBank.for_scale(i)
        pow_ref = log_power_spectrum(reference, bank)
        pow_est = log_power_spectrum(estimate, bank)
        mel_ref = mel_spectrum(reference, bank)
        mel_est = mel_spectrum(estimate, bank)
        term = (_l1(pow_ref, pow_est) + _rms(pow_ref, pow_est)
                + _l1(mel_ref, mel_est) + _rms(mel_ref, mel_est))
        per_scale[i] = float(term)
    total = float(np.mean(list(per_scale.values())))
    return MultiScaleLoss(total, per_scale)


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a - b)))


def _rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def adv_hinge(fake: DiscriminatorOutput) -> float:
    """Generator hinge: mean over discriminators of the per-step mean of
    max(0, 1 - score) on the synthesized signal."""
    per_disc = [np.mean(np.maximum(0.0, 1.0 - s)) for s in fake.scores]
    return float(np.mean(per_disc))


def feature_match(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> float:
    """Mean absolute distance between real and fake feature maps, averaged
    over layers and discriminators."""
    if real.num_discriminators != fake.num_discriminators:
        raise InvalidInputError("real and fake passes disagree on discriminator count")
    if real.num_layers != fake.num_layers:
        raise InvalidInputError("real and fake passes disagree on layer count")
    terms = []
    for maps_r, maps_f in zip(real.features, fake.features):
        for m_r, m_f in zip(maps_r, maps_f):
            if m_r.shape != m_f.shape:
                raise InvalidInputError(
                    f"feature shapes differ between passes: {m_r.shape} vs {m_f.shape}"
                )
            terms.append(np.mean(np.abs(m_r - m_f)))
    return float(np.mean(terms))


def commit_loss(frames: np.ndarray, stack: QuantizerStack,
                n_active: int | None = None) -> float:
    """Commitment penalty tying encoder frames to their quantization.

    Mean squared error between the frames and their full RVQ reconstruction,
    plus the average over stages of the mean squared error between each
    stage's input residual and that stage's own quantization of it.
    """
    frames = np.asarray(frames, dtype=np.float64)
    tokens, quantized, _ = stack.rvq_encode(frames, n_active)
    total = float(np.mean((frames - quantized) ** 2))
    residual = frames.copy()
    stage_terms = []
    for i in range(tokens.num_stages):
        step = stack.codebooks[i].vectors[tokens.indices[i]]
        stage_terms.append(np.mean((residual - step) ** 2))
        residual -= step
    return total + float(np.mean(stage_terms))


@dataclass
class LossReport:
    """All loss components, their weighted total, and the spectral
    per-scale breakdown."""

    time: float
    spectral: float
    adversarial: float
    feature: float
    commit: float
    total: float
    per_scale: dict = field(default_factory=dict)
    weights: LossWeights = DEFAULT_WEIGHTS

    def to_dict(self) -> dict:
        return {
            "l_t": self.time,
            "l_f": self.spectral,
            "l_adv": self.adversarial,
            "l_feat": self.feature,
            "l_cm": self.commit,
            "total": self.total,
            "per_scale": {str(k): v for k, v in sorted(self.per_scale.items())},
            "weights": {
                "l_t": self.weights.time,
                "l_f": self.weights.spectral,
                "l_adv": self.weights.adversarial,
                "l_feat": self.weights.feature,
                "l_cm": self.weights.commit,
            },
        }


_TERM_NAMES = ("time", "spectral", "adversarial", "feature", "commit")


def total_loss(time: float, spectral: float, adversarial: float, feature: float,
               commit: float, weights: LossWeights = DEFAULT_WEIGHTS,
               per_scale: dict | None = None) -> LossReport:
    """Weighted sum of the five components.

    Rejects non-finite components, naming the offending term.
    """
    values = (time, spectral, adversarial, feature, commit)
    for name, value in zip(_TERM_NAMES, values):
        if not np.isfinite(value):
            raise NumericError(f"loss component {name!r} is not finite: {value}")
    total = float(np.dot(values, weights.as_tuple()))
    return LossReport(
        time=float(time), spectral=float(spectral), adversarial=float(adversarial),
        feature=float(feature), commit=float(commit), total=total,
        per_scale=dict(per_scale or {}), weights=weights,
    )


def discriminator_update_gate(disc_loss: float, codec_loss: float) -> bool:
    """Update the discriminator only while it is strictly behind the codec."""
    if not (np.isfinite(disc_loss) and np.isfinite(codec_loss)):
        raise NumericError(
            f"gate inputs must be finite, got disc={disc_loss} codec={codec_loss}"
        )
    return disc_loss > codec_loss
