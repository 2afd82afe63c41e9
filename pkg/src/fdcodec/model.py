"""Frequency-domain encoder/decoder pair and its analytical bookkeeping.

The encoder maps a feature map (channels, T, 257) through a 7x7 stem, B
downsampling blocks (each a 3x3 squeeze, a 1x1 expand, and a strided
(2*S_b, 8) mixer that halves nothing but doubles channels while dividing
frequency by 4 and time by S_b), a width-16C recurrent layer, and a linear
projection to D-dimensional frames.  The decoder mirrors the encoder with
transposed convolutions.

Weights are drawn once from a seeded generator and stay frozen; the same
config and seed always rebuild byte-identical modules.  An identity
activation switch replaces the ELU nonlinearities so linear behavior can be
probed directly.

Complexity is counted analytically from the layer specs: parameters exactly
and multiply-accumulates per second of 16 kHz input (one MAC per
multiply-add; an optional factor-2 view reports classic FLOPs).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .audio import AudioBuffer, rms_normalize
from .dsp import (FeatureMap, MODE_CHANNELS, MODE_MAG_ANGLE, MODE_MAG_PHASE,
                  domain_transform, stft)
from .errors import ConfigurationError, InvalidInputError
from .losses import DiscriminatorOutput
from .quantizer import FitReport, QuantizerStack, fit_stack

GROUP_RULES = ("cin", "cin/4", "cin/8")

DEFAULT_SEED = 710


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and rate parameters for one codec model."""

    mode: str = MODE_MAG_PHASE
    channels: int = 32
    blocks: int = 4
    strides: tuple = (1, 1, 1, 2)
    groups_enc: int | str = 1
    groups_dec: int | str = 1
    code_dim: int = 128
    num_quantizers: int = 8
    codebook_size: int = 1024
    sample_rate: int = 16000
    window_size: int = 512
    hop_size: int = 160
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.mode not in (MODE_MAG_ANGLE, MODE_MAG_PHASE):
            raise ConfigurationError(f"unsupported feature mode {self.mode!r}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigurationError(f"channel count must be even and >= 2, got {self.channels}")
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.strides) != self.blocks:
            raise ConfigurationError(
                f"{self.blocks} blocks need {self.blocks} strides, got {len(self.strides)}"
            )
        if any(s < 1 for s in self.strides):
            raise ConfigurationError(f"strides must be >= 1, got {self.strides}")
        if self.window_size // 2 != 4 ** self.blocks:
            raise ConfigurationError(
                f"window {self.window_size} needs {self.blocks} blocks to collapse "
                f"frequency to one bin; expected window {2 * 4 ** self.blocks}"
            )
        for label, rule in (("groups_enc", self.groups_enc), ("groups_dec", self.groups_dec)):
            if isinstance(rule, str):
                if rule not in GROUP_RULES:
                    raise ConfigurationError(
                        f"{label} must be a positive int or one of {GROUP_RULES}, got {rule!r}"
                    )
            elif not (isinstance(rule, int) and rule >= 1):
                raise ConfigurationError(f"{label} must be a positive int, got {rule!r}")
        if self.code_dim < 1 or self.num_quantizers < 1 or self.codebook_size < 2:
            raise ConfigurationError("code_dim, num_quantizers >= 1 and codebook_size >= 2 required")
        if self.sample_rate <= 0 or self.hop_size <= 0:
            raise ConfigurationError("sample rate and hop must be positive")

    @property
    def input_channels(self) -> int:
        return MODE_CHANNELS[self.mode]

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.strides))

    @property
    def waveform_stride(self) -> int:
        """Samples of waveform consumed per token frame."""
        return self.hop_size * self.stride_product

    @property
    def recurrent_width(self) -> int:
        return self.channels * 2 ** self.blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def resolve_groups(rule: int | str, c_in: int, c_out: int) -> int:
    """Concrete group count for one convolution.

    Integer rules must divide both channel counts.  Symbolic rules ("cin",
    "cin/4", "cin/8") are evaluated against the input channels and clamped
    to the largest feasible divisor, so "cin" means as depthwise as the
    layer allows.
    """
    if isinstance(rule, int):
        if c_in % rule or c_out % rule:
            raise ConfigurationError(
                f"groups {rule} does not divide channels {c_in} -> {c_out}"
            )
        return rule
    if rule not in GROUP_RULES:
        raise ConfigurationError(
            f"group rule must be a positive int or one of {GROUP_RULES}, got {rule!r}"
        )
    divisor = {"cin": 1, "cin/4": 4, "cin/8": 8}[rule]
    requested = max(c_in // divisor, 1)
    return math.gcd(math.gcd(requested, c_in), c_out)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the symbolic architecture walk.

    For convolutions ``pad_t``/``pad_f`` are (before, after) input padding;
    for transposed convolutions they are the output crop that mirrors it.
    """

    name: str
    kind: str                     # conv | conv_transpose | lstm | linear | reshape
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    groups: int = 1
    pad_t: tuple = (0, 0)
    pad_f: tuple = (0, 0)
    activation: bool = False


def _split_pad(total: int) -> tuple:
    return (total // 2, total - total // 2)


def encoder_layer_specs(cfg: ModelConfig) -> list:
    """Layer list of the encoder: stem, B blocks, reshape, recurrence,
    projection."""
    specs = [LayerSpec(
        "PreConv2D", "conv", cfg.input_channels, cfg.channels,
        kernel=(7, 7), stride=(1, 1), pad_t=(3, 3), pad_f=_split_pad(5),
        activation=True,
    )]
    width = cfg.channels
    for b, s in enumerate(cfg.strides, start=1):
        specs.append(LayerSpec(
            f"EncBlock{b}/Conv2D_1", "conv", width, width // 2,
            kernel=(3, 3), stride=(1, 1), pad_t=(1, 1), pad_f=(1, 1), activation=True,
        ))
        specs.append(LayerSpec(
            f"EncBlock{b}/Conv2D_2", "conv", width // 2, width,
            kernel=(1, 1), stride=(1, 1), activation=True,
        ))
        specs.append(LayerSpec(
            f"EncBlock{b}/Conv2D_ds", "conv", width, 2 * width,
            kernel=(2 * s, 8), stride=(s, 4),
            groups=resolve_groups(cfg.groups_enc, width, 2 * width),
            pad_t=_split_pad(s), pad_f=(2, 2), activation=True,
        ))
        width *= 2
    specs.append(LayerSpec("Reshape", "reshape"))
    specs.append(LayerSpec("LSTM", "lstm", width, width))
    specs.append(LayerSpec("OutLinear", "linear", width, cfg.code_dim))
    return specs


def decoder_layer_specs(cfg: ModelConfig) -> list:
    """Mirror of the encoder: projection, recurrence, reshape, B transposed
    blocks, output stem."""
    width = cfg.recurrent_width
    specs = [
        LayerSpec("InLinear", "linear", cfg.code_dim, width, activation=True),
        LayerSpec("LSTM", "lstm", width, width),
        LayerSpec("Reshape", "reshape"),
    ]
    for b in range(cfg.blocks, 0, -1):
        s = cfg.strides[b - 1]
        block_width = cfg.channels * 2 ** (b - 1)
        specs.append(LayerSpec(
            f"DecBlock{b}/ConvT2D_us", "conv_transpose", 2 * block_width, block_width,
            kernel=(2 * s, 8), stride=(s, 4),
            groups=resolve_groups(cfg.groups_dec, 2 * block_width, block_width),
            pad_t=_split_pad(s), pad_f=(2, 2), activation=True,
        ))
        specs.append(LayerSpec(
            f"DecBlock{b}/Conv2D_2", "conv", block_width, block_width // 2,
            kernel=(1, 1), stride=(1, 1), activation=True,
        ))
        specs.append(LayerSpec(
            f"DecBlock{b}/Conv2D_1", "conv", block_width // 2, block_width,
            kernel=(3, 3), stride=(1, 1), pad_t=(1, 1), pad_f=(1, 1), activation=True,
        ))
    specs.append(LayerSpec(
        "PostConv2D", "conv_transpose", cfg.channels, cfg.input_channels,
        kernel=(7, 7), stride=(1, 1), pad_t=(3, 3), pad_f=_split_pad(5),
    ))
    return specs


def output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Shape produced by one layer.

    Convolution stages use (channels, T, F); after the encoder reshape the
    walk continues on (T, width).  Strided convolutions floor, so a time
    axis not divisible by the stride loses its remainder frames.
    """
    if spec.kind == "conv":
        c, t, f = shape
        if c != spec.in_channels:
            raise InvalidInputError(f"{spec.name}: expected {spec.in_channels} channels, got {c}")
        t_out = (t + sum(spec.pad_t) - spec.kernel[0]) // spec.stride[0] + 1
        f_out = (f + sum(spec.pad_f) - spec.kernel[1]) // spec.stride[1] + 1
        if t_out < 1 or f_out < 1:
            raise InvalidInputError(f"{spec.name}: input {shape} too small for kernel")
        return (spec.out_channels, t_out, f_out)
    if spec.kind == "conv_transpose":
        c, t, f = shape
        if c != spec.in_channels:
            raise InvalidInputError(f"{spec.name}: expected {spec.in_channels} channels, got {c}")
        t_out = (t - 1) * spec.stride[0] + spec.kernel[0] - sum(spec.pad_t)
        f_out = (f - 1) * spec.stride[1] + spec.kernel[1] - sum(spec.pad_f)
        return (spec.out_channels, t_out, f_out)
    if spec.kind == "reshape":
        if len(shape) == 3:
            c, t, f = shape
            return (t, c * f)
        t, w = shape
        return (w, t, 1)
    if spec.kind in ("lstm", "linear"):
        t, w = shape
        if w != spec.in_channels:
            raise InvalidInputError(f"{spec.name}: expected width {spec.in_channels}, got {w}")
        return (t, spec.out_channels)
    raise InvalidInputError(f"unknown layer kind {spec.kind!r}")


def trace_shapes(specs: list, shape: tuple) -> list:
    """(name, output shape) for every layer, starting from ``shape``."""
    out = []
    for spec in specs:
        shape = output_shape(spec, shape)
        out.append((spec.name, shape))
    return out


# ---------------------------------------------------------------------------
# torch modules


def _init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Uniform weights from the shared generator, zero biases.

    Bounds follow 1/sqrt(fan_in) so activations stay comparable in scale
    across layers; parameter order is the build order, which makes the draw
    reproducible for a fixed seed.
    """
    for name, param in module.named_parameters():
        if "bias" in name:
            with torch.no_grad():
                param.zero_()
            continue
        if param.ndim >= 2:
            fan_in = int(np.prod(param.shape[1:]))
        else:
            fan_in = param.shape[0]
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        with torch.no_grad():
            param.copy_((torch.rand(param.shape, generator=gen) * 2.0 - 1.0) * bound)


class _SpecStack(nn.Module):
    """Shared runner for an encoder or decoder layer-spec list."""

    def __init__(self, cfg: ModelConfig, specs: list, seed_offset: int,
                 identity_activation: bool = False):
        super().__init__()
        self.cfg = cfg
        self.specs = specs
        self.identity_activation = identity_activation
        self.ops = nn.ModuleDict()
        for spec in specs:
            key = spec.name.replace("/", "_")
            if spec.kind == "conv":
                self.ops[key] = nn.Conv2d(
                    spec.in_channels, spec.out_channels, spec.kernel,
                    stride=spec.stride, padding=0, groups=spec.groups,
                )
            elif spec.kind == "conv_transpose":
                self.ops[key] = nn.ConvTranspose2d(
                    spec.in_channels, spec.out_channels, spec.kernel,
                    stride=spec.stride, padding=0, groups=spec.groups,
                )
            elif spec.kind == "lstm":
                self.ops[key] = nn.LSTM(spec.in_channels, spec.out_channels,
                                        num_layers=1, batch_first=True)
            elif spec.kind == "linear":
                self.ops[key] = nn.Linear(spec.in_channels, spec.out_channels)
        gen = torch.Generator().manual_seed(cfg.seed + seed_offset)
        for spec in specs:
            key = spec.name.replace("/", "_")
            if key in self.ops:
                _init_parameters(self.ops[key], gen)
        self.eval()

    def _act(self, x: torch.Tensor, spec: LayerSpec) -> torch.Tensor:
        if spec.activation and not self.identity_activation:
            return torch.nn.functional.elu(x)
        return x

    def _run(self, x: torch.Tensor, specs: list) -> torch.Tensor:
        for spec in specs:
            key = spec.name.replace("/", "_")
            if spec.kind == "conv":
                x = torch.nn.functional.pad(
                    x, (spec.pad_f[0], spec.pad_f[1], spec.pad_t[0], spec.pad_t[1]))
                x = self._act(self.ops[key](x), spec)
            elif spec.kind == "conv_transpose":
                x = self.ops[key](x)
                t_end = x.shape[2] - spec.pad_t[1]
                f_end = x.shape[3] - spec.pad_f[1]
                x = self._act(x[:, :, spec.pad_t[0]:t_end, spec.pad_f[0]:f_end], spec)
            elif spec.kind == "reshape":
                if x.ndim == 4:
                    # (1, C, T, 1) -> (1, T, C)
                    x = x.squeeze(3).permute(0, 2, 1)
                else:
                    # (1, T, W) -> (1, W, T, 1)
                    x = x.permute(0, 2, 1).unsqueeze(3)
            elif spec.kind == "lstm":
                x, _ = self.ops[key](x)
                x = self._act(x, spec)
            elif spec.kind == "linear":
                x = self._act(self.ops[key](x), spec)
        return x


class SpectralEncoder(_SpecStack):
    """Feature map (channels, T, F) -> frame matrix (T_B, D)."""

    def __init__(self, cfg: ModelConfig, identity_activation: bool = False):
        super().__init__(cfg, encoder_layer_specs(cfg), seed_offset=0,
                         identity_activation=identity_activation)

    def _prepare(self, features) -> torch.Tensor:
        if isinstance(features, FeatureMap):
            if features.mode != self.cfg.mode:
                raise InvalidInputError(
                    f"encoder built for {self.cfg.mode!r} got {features.mode!r} features"
                )
            features = features.data
        x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
        if x.ndim != 3 or x.shape[0] != self.cfg.input_channels:
            raise InvalidInputError(
                f"expected ({self.cfg.input_channels}, T, F) features, got {tuple(x.shape)}"
            )
        expected_bins = self.cfg.window_size // 2 + 1
        if x.shape[2] != expected_bins:
            raise InvalidInputError(
                f"expected {expected_bins} frequency bins, got {x.shape[2]}"
            )
        return x.unsqueeze(0)

    def forward(self, features) -> torch.Tensor:
        x = self._prepare(features)
        with torch.no_grad():
            return self._run(x, self.specs)[0]

    def conv_features(self, features) -> torch.Tensor:
        """Frames after the convolutional stack and reshape, before the
        recurrence; (T_B, 16C)."""
        x = self._prepare(features)
        cut = next(i for i, s in enumerate(self.specs) if s.kind == "lstm")
        with torch.no_grad():
            return self._run(x, self.specs[:cut])[0]


class SpectralDecoder(_SpecStack):
    """Frame matrix (T_B, D) -> feature map (channels, T_B * stride_product, F)."""

    def __init__(self, cfg: ModelConfig, identity_activation: bool = False):
        super().__init__(cfg, decoder_layer_specs(cfg), seed_offset=1,
                         identity_activation=identity_activation)

    def forward(self, frames) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
        if x.ndim != 2 or x.shape[1] != self.cfg.code_dim:
            raise InvalidInputError(
                f"expected (T, {self.cfg.code_dim}) frames, got {tuple(x.shape)}"
            )
        with torch.no_grad():
            return self._run(x.unsqueeze(0), self.specs)[0]

    def to_feature_map(self, frames) -> FeatureMap:
        data = self.forward(frames).numpy().astype(np.float64)
        return FeatureMap(self.cfg.mode, data, self.cfg.window_size, self.cfg.hop_size)


def encoder_forward(encoder: SpectralEncoder, features) -> np.ndarray:
    """Encoder forward with numpy output, (T_B, D) float64."""
    return encoder(features).numpy().astype(np.float64)


def extract_features(cfg: ModelConfig, encoder: SpectralEncoder,
                     audio: AudioBuffer) -> np.ndarray:
    """Waveform -> spectrogram -> feature map -> encoder frames."""
    if audio.sample_rate != cfg.sample_rate:
        raise InvalidInputError(
            f"model expects {cfg.sample_rate} Hz, got {audio.sample_rate} Hz"
        )
    spec = stft(audio, cfg.window_size, cfg.hop_size)
    return encoder_forward(encoder, domain_transform(spec, cfg.mode))


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class LayerComplexity:
    name: str
    params: int
    macs_per_second: float


@dataclass
class ComplexityReport:
    """Analytical parameter and MAC counts for one configuration."""

    config: ModelConfig
    encoder_params: int
    decoder_params: int
    layers: list = field(default_factory=list)
    macs_per_second: float = 0.0

    @property
    def total_params(self) -> int:
        return self.encoder_params + self.decoder_params

    def to_dict(self, flops_per_mac: int = 1) -> dict:
        return {
            "mode": self.config.mode,
            "channels": self.config.channels,
            "strides": list(self.config.strides),
            "groups": [str(self.config.groups_enc), str(self.config.groups_dec)],
            "waveform_stride": self.config.waveform_stride,
            "encoder_params": self.encoder_params,
            "decoder_params": self.decoder_params,
            "total_params": self.total_params,
            "macs_per_second": self.macs_per_second,
            "flops_per_second": self.macs_per_second * flops_per_mac,
            "flops_per_mac": flops_per_mac,
            "layers": [
                {"name": l.name, "params": l.params, "macs_per_second": l.macs_per_second}
                for l in self.layers
            ],
        }


def _layer_params(spec: LayerSpec) -> int:
    if spec.kind in ("conv", "conv_transpose"):
        k = spec.kernel[0] * spec.kernel[1]
        return k * (spec.in_channels // spec.groups) * spec.out_channels + spec.out_channels
    if spec.kind == "lstm":
        # four gates, input + recurrent weights, two bias vectors
        return 4 * ((spec.in_channels + spec.out_channels) * spec.out_channels
                    + 2 * spec.out_channels)
    if spec.kind == "linear":
        return spec.in_channels * spec.out_channels + spec.out_channels
    return 0


def _walk_macs(specs: list, channels: int, t_rate: float, f_dim: int) -> list:
    """(spec, params, macs/s) rows; the time axis is a frame rate, so
    strided layers divide it exactly instead of flooring."""
    rows = []
    shape_f = f_dim
    rate = t_rate
    width = channels
    for spec in specs:
        params = _layer_params(spec)
        if spec.kind == "conv":
            f_out = (shape_f + sum(spec.pad_f) - spec.kernel[1]) // spec.stride[1] + 1
            rate_out = rate / spec.stride[0]
            macs = (spec.kernel[0] * spec.kernel[1]
                    * (spec.in_channels // spec.groups) * spec.out_channels
                    * rate_out * f_out)
            shape_f, rate = f_out, rate_out
        elif spec.kind == "conv_transpose":
            macs = (spec.kernel[0] * spec.kernel[1]
                    * (spec.in_channels // spec.groups) * spec.out_channels
                    * rate * shape_f)
            shape_f = (shape_f - 1) * spec.stride[1] + spec.kernel[1] - sum(spec.pad_f)
            rate = rate * spec.stride[0]
        elif spec.kind == "lstm":
            macs = 4 * (spec.in_channels * spec.out_channels
                        + spec.out_channels * spec.out_channels) * rate
        elif spec.kind == "linear":
            macs = spec.in_channels * spec.out_channels * rate
        else:
            macs = 0.0
        rows.append((spec, params, float(macs)))
    return rows


def count_complexity(cfg: ModelConfig) -> ComplexityReport:
    """Walk both networks at the configured frame rate."""
    frame_rate = cfg.sample_rate / cfg.hop_size
    bins = cfg.window_size // 2 + 1
    enc_rows = _walk_macs(encoder_layer_specs(cfg), cfg.input_channels, frame_rate, bins)
    token_rate = frame_rate / cfg.stride_product
    dec_rows = _walk_macs(decoder_layer_specs(cfg), cfg.code_dim, token_rate, 1)
    layers = [LayerComplexity(f"enc/{s.name}", p, m) for s, p, m in enc_rows]
    layers += [LayerComplexity(f"dec/{s.name}", p, m) for s, p, m in dec_rows]
    return ComplexityReport(
        config=cfg,
        encoder_params=sum(p for _, p, _ in enc_rows),
        decoder_params=sum(p for _, p, _ in dec_rows),
        layers=layers,
        macs_per_second=sum(m for _, _, m in enc_rows) + sum(m for _, _, m in dec_rows),
    )


# ---------------------------------------------------------------------------
# toy multi-resolution spectral discriminator


DISC_SCALES = (256, 512, 1024)
DISC_LAYERS = (32, 16, 8)


def mstftd_forward(audio: AudioBuffer, scales=DISC_SCALES, seed: int = 4801):
    """Deterministic multi-resolution spectral discriminator.

    One track per STFT scale: the log-magnitude grid runs through a few
    fixed random tanh layers; the score is a linear readout per frame.
    Weights depend only on (seed, scale, layer), never on the input, so the
    same audio always produces identical outputs.
    """
    scores = []
    features = []
    for window in scales:
        spec = stft(audio, window, max(window // 4, 1))
        grid = np.log(np.abs(spec.frames) + 1e-5).T  # (F, T)
        rng = np.random.default_rng(seed * 1000003 + window)
        maps = []
        h = grid
        for width in DISC_LAYERS:
            w = rng.standard_normal((width, h.shape[0])) / np.sqrt(h.shape[0])
            h = np.tanh(w @ h)
            maps.append(h)
        readout = rng.standard_normal((1, h.shape[0])) / np.sqrt(h.shape[0])
        scores.append((readout @ h)[0])
        features.append(maps)
    return DiscriminatorOutput(scores=scores, features=features)


# ---------------------------------------------------------------------------
# codebook fitting


def fit_codebooks(cfg: ModelConfig, corpus, steps: int = 0,
                  seed: int | None = None) -> tuple[QuantizerStack, FitReport]:
    """Fit the quantizer stack on encoder features of an audio corpus.

    The initialization batch pools corpus items in order until it holds at
    least ``codebook_size`` frames, then every stage is seeded by
    sequential k-means; ``steps`` further batches (cycling the corpus one
    item at a time) run the EMA update and dead-code reassignment.  With
    the same seed the result is bit-for-bit reproducible.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("fit corpus is empty")
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    encoder = SpectralEncoder(cfg)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    feature_cache: dict[int, np.ndarray] = {}

    def features_of(index: int) -> np.ndarray:
        if index not in feature_cache:
            normalized, _ = rms_normalize(corpus[index])
            feature_cache[index] = extract_features(cfg, encoder, normalized)
        return feature_cache[index]

    def batches():
        pooled = [features_of(0)]
        total = pooled[0].shape[0]
        while total < cfg.codebook_size and len(pooled) < len(corpus):
            nxt = features_of(len(pooled))
            pooled.append(nxt)
            total += nxt.shape[0]
        yield pooled[0] if len(pooled) == 1 else np.concatenate(pooled, axis=0)
        for step in range(steps):
            yield features_of(step % len(corpus))

    stack = QuantizerStack.empty(cfg.num_quantizers, cfg.codebook_size, cfg.code_dim)
    report = fit_stack(stack, batches(), rng)
    return stack, report
