"""End-to-end speech codec pipeline.

Encoding normalizes the file to a reference RMS level, cuts it into 3.2 s
segments (the final one zero-padded), runs each segment through the
spectral front end, the encoder, and the quantizer stack, and packs the
token rows of all segments into one stream whose header records the gain
and the true sample count.  Decoding inverts each step and trims back to
the original length.
"""

from __future__ import annotations

import numpy as np

from .audio import AudioBuffer, rms_normalize
from .bitstream import CodecHeader, pack, unpack
from .dsp import domain_invert, domain_transform, istft, stft
from .errors import InvalidInputError, StateError
from .model import ModelConfig, SpectralDecoder, SpectralEncoder, encoder_forward
from .quantizer import QuantizerStack, TokenMatrix

SEGMENT_SECONDS = 3.2
TARGET_RMS = 0.1


def segment_length(sample_rate: int) -> int:
    return int(round(SEGMENT_SECONDS * sample_rate))


def split_segments(samples: np.ndarray, seg_len: int) -> list:
    """Cut a waveform into fixed-length pieces, zero-padding the last."""
    if len(samples) == 0:
        raise InvalidInputError("cannot segment an empty waveform")
    out = []
    for start in range(0, len(samples), seg_len):
        piece = samples[start:start + seg_len]
        if len(piece) < seg_len:
            piece = np.concatenate([piece, np.zeros(seg_len - len(piece))])
        out.append(piece)
    return out


class SpeechCodec:
    """A frozen encoder/decoder pair plus a fitted quantizer stack."""

    def __init__(self, cfg: ModelConfig, stack: QuantizerStack,
                 identity_activation: bool = False):
        if stack.dim != cfg.code_dim:
            raise InvalidInputError(
                f"stack dimension {stack.dim} does not match code_dim {cfg.code_dim}"
            )
        if stack.num_quantizers < 1:
            raise InvalidInputError("quantizer stack is empty")
        self.cfg = cfg
        self.stack = stack
        self.encoder = SpectralEncoder(cfg, identity_activation)
        self.decoder = SpectralDecoder(cfg, identity_activation)

    # -- encoding ----------------------------------------------------------

    def _check_nq(self, n_q: int | None) -> int:
        n = self.cfg.num_quantizers if n_q is None else n_q
        if not 1 <= n <= self.stack.num_quantizers:
            raise InvalidInputError(
                f"n_q {n} outside 1..{self.stack.num_quantizers}"
            )
        return n

    def encode_tokens(self, audio: AudioBuffer, n_q: int | None = None
                      ) -> tuple[TokenMatrix, float, int]:
        """Tokens for a whole file: (tokens, rms gain, true sample count)."""
        if audio.sample_rate != self.cfg.sample_rate:
            raise InvalidInputError(
                f"codec expects {self.cfg.sample_rate} Hz, got {audio.sample_rate} Hz"
            )
        if not self.stack.initialized:
            raise StateError("quantizer stack is not fitted")
        n = self._check_nq(n_q)
        normalized, gain = rms_normalize(audio, TARGET_RMS)
        seg_len = segment_length(self.cfg.sample_rate)
        rows = []
        for piece in split_segments(normalized.samples, seg_len):
            spec = stft(AudioBuffer(piece, self.cfg.sample_rate),
                        self.cfg.window_size, self.cfg.hop_size)
            frames = encoder_forward(self.encoder, domain_transform(spec, self.cfg.mode))
            tokens, _, _ = self.stack.rvq_encode(frames, n)
            rows.append(tokens.indices)
        return TokenMatrix(np.concatenate(rows, axis=1)), gain, len(audio)

    def encode(self, audio: AudioBuffer, n_q: int | None = None) -> bytes:
        tokens, gain, num_samples = self.encode_tokens(audio, n_q)
        header = CodecHeader(
            sample_rate=self.cfg.sample_rate,
            stride=self.cfg.waveform_stride,
            n_q=tokens.num_stages,
            codebook_size=self.cfg.codebook_size,
            frame_count=tokens.num_frames,
            num_samples=num_samples,
            rms_gain=gain,
            mode=self.cfg.mode,
        )
        return pack(header, tokens)

    # -- decoding ----------------------------------------------------------

    def _check_header(self, header: CodecHeader) -> None:
        mismatches = []
        if header.sample_rate != self.cfg.sample_rate:
            mismatches.append(f"sample rate {header.sample_rate} != {self.cfg.sample_rate}")
        if header.stride != self.cfg.waveform_stride:
            mismatches.append(f"stride {header.stride} != {self.cfg.waveform_stride}")
        if header.codebook_size != self.cfg.codebook_size:
            mismatches.append(f"codebook size {header.codebook_size} != {self.cfg.codebook_size}")
        if header.mode != self.cfg.mode:
            mismatches.append(f"mode {header.mode} != {self.cfg.mode}")
        if header.n_q > self.stack.num_quantizers:
            mismatches.append(
                f"stream uses {header.n_q} quantizers, stack has {self.stack.num_quantizers}"
            )
        if mismatches:
            raise InvalidInputError(
                "stream does not match the loaded model: " + "; ".join(mismatches)
            )

    def decode_tokens(self, header: CodecHeader, tokens: TokenMatrix,
                      n_q: int | None = None) -> AudioBuffer:
        self._check_header(header)
        n = header.n_q if n_q is None else n_q
        if not 1 <= n <= tokens.num_stages:
            raise InvalidInputError(
                f"requested {n} of {tokens.num_stages} encoded token rows"
            )
        active = tokens.prefix(n) if n < tokens.num_stages else tokens
        seg_frames = segment_length(self.cfg.sample_rate) // self.cfg.waveform_stride
        pieces = []
        for start in range(0, active.num_frames, seg_frames):
            chunk = TokenMatrix(active.indices[:, start:start + seg_frames])
            frames = self.stack.rvq_decode(chunk)
            feature_map = self.decoder.to_feature_map(frames)
            spec = domain_invert(feature_map)
            piece_len = chunk.num_frames * self.cfg.waveform_stride
            pieces.append(istft(spec, piece_len, self.cfg.sample_rate).samples)
        samples = np.concatenate(pieces) if pieces else np.zeros(0)
        true_len = min(header.num_samples, len(samples))
        return AudioBuffer(samples[:true_len] * header.rms_gain, self.cfg.sample_rate)

    def decode(self, data: bytes, n_q: int | None = None) -> AudioBuffer:
        header, tokens = unpack(data)
        return self.decode_tokens(header, tokens, n_q)
