"""Token stream serialization and rate arithmetic.

Stream layout (".fcs"), all multi-byte header fields little-endian:

    offset  size  field
    0       4     magic "FCS1"
    4       1     format version (currently 1)
    5       1     feature-mode tag (0 time, 1 mag_angle, 2 mag_phase)
    6       2     n_q, number of quantizer stages     (uint16)
    8       4     sample rate in Hz                   (uint32)
    12      4     waveform stride, samples per frame  (uint32)
    16      4     codebook size K, a power of two     (uint32)
    20      4     frame count T                       (uint32)
    24      8     original sample count               (uint64)
    32      4     RMS gain                            (float32)

The payload packs tokens frame-major (all stages of frame 0, then frame 1,
...), each token as log2(K) bits, most significant bit first, zero-padded
to a whole number of bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, InvalidInputError
from .quantizer import TokenMatrix

STREAM_MAGIC = b"FCS1"
STREAM_VERSION = 1

_HEADER_FMT = "<4sBBHIIIIQf"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

MODE_TAGS = {"time": 0, "mag_angle": 1, "mag_phase": 2}
TAG_MODES = {v: k for k, v in MODE_TAGS.items()}

REFERENCE_RATE = 16000


class FormatError(CodecError, ValueError):
    """A byte stream does not parse as a valid token stream."""


class BadMagicError(FormatError):
    """The stream does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """The stream declares an unsupported format version."""


class TruncatedStreamError(FormatError):
    """The stream ends before its declared payload."""


def _bits_per_token(codebook_size: int) -> int:
    if codebook_size < 2 or codebook_size & (codebook_size - 1):
        raise InvalidInputError(
            f"codebook size must be a power of two >= 2, got {codebook_size}"
        )
    return codebook_size.bit_length() - 1


def payload_size(frame_count: int, n_q: int, codebook_size: int) -> int:
    """Exact payload byte count: ceil(T * n_q * log2(K) / 8)."""
    bits = frame_count * n_q * _bits_per_token(codebook_size)
    return (bits + 7) // 8


@dataclass
class CodecHeader:
    """Decoded stream header."""

    sample_rate: int
    stride: int
    n_q: int
    codebook_size: int
    frame_count: int
    num_samples: int
    rms_gain: float
    mode: str
    version: int = STREAM_VERSION

    def __post_init__(self):
        if self.mode not in MODE_TAGS:
            raise InvalidInputError(f"unknown feature mode {self.mode!r}")
        if self.sample_rate <= 0 or self.stride <= 0:
            raise InvalidInputError("sample rate and stride must be positive")
        if self.n_q < 1 or self.n_q > 0xFFFF:
            raise InvalidInputError(f"n_q {self.n_q} outside 1..65535")
        if self.frame_count < 0 or self.num_samples < 0:
            raise InvalidInputError("frame and sample counts must be non-negative")
        _bits_per_token(self.codebook_size)

    def tkr(self) -> float:
        return compute_tkr(self.sample_rate, self.stride, self.n_q)

    def bits_per_second(self) -> float:
        return bits_per_second(self.tkr(), self.codebook_size)


def pack(header: CodecHeader, tokens: TokenMatrix) -> bytes:
    """Serialize a header and its token matrix to stream bytes."""
    if tokens.num_stages != header.n_q:
        raise InvalidInputError(
            f"token matrix has {tokens.num_stages} stages, header says {header.n_q}"
        )
    if tokens.num_frames != header.frame_count:
        raise InvalidInputError(
            f"token matrix has {tokens.num_frames} frames, header says {header.frame_count}"
        )
    bits = _bits_per_token(header.codebook_size)
    if tokens.indices.size and tokens.indices.max() >= header.codebook_size:
        raise InvalidInputError(
            f"token {tokens.indices.max()} out of range for K={header.codebook_size}"
        )
    head = struct.pack(
        _HEADER_FMT, STREAM_MAGIC, header.version, MODE_TAGS[header.mode],
        header.n_q, header.sample_rate, header.stride, header.codebook_size,
        header.frame_count, header.num_samples, header.rms_gain,
    )
    # frame-major order: tokens.indices is (n_q, T); transpose to (T, n_q)
    flat = tokens.indices.T.reshape(-1).astype(np.uint64)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bit_rows = ((flat[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    payload = np.packbits(bit_rows.reshape(-1), bitorder="big").tobytes()
    return head + payload


def unpack(data: bytes) -> tuple[CodecHeader, TokenMatrix]:
    """Parse stream bytes back into a header and token matrix.

    Raises a :class:`FormatError` subclass on any malformed input; never
    allocates beyond the input size.
    """
    if len(data) < 4:
        raise TruncatedStreamError(f"stream of {len(data)} bytes has no magic")
    if data[:4] != STREAM_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError(
            f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header"
        )
    (_, version, mode_tag, n_q, sample_rate, stride, codebook_size,
     frame_count, num_samples, rms_gain) = struct.unpack_from(_HEADER_FMT, data)
    if version != STREAM_VERSION:
        raise VersionMismatchError(f"unsupported stream version {version}")
    if mode_tag not in TAG_MODES:
        raise FormatError(f"unknown feature-mode tag {mode_tag}")
    if n_q < 1:
        raise FormatError("n_q must be at least 1")
    if sample_rate == 0 or stride == 0:
        raise FormatError("sample rate and stride must be positive")
    if codebook_size < 2 or codebook_size & (codebook_size - 1):
        raise FormatError(f"codebook size {codebook_size} is not a power of two")
    bits = codebook_size.bit_length() - 1
    expected = (frame_count * n_q * bits + 7) // 8
    payload = data[HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncatedStreamError(
            f"payload is {len(payload)} bytes, header requires {expected}"
        )
    if len(payload) > expected:
        raise FormatError(
            f"{len(payload) - expected} trailing bytes after the declared payload"
        )
    header = CodecHeader(
        sample_rate=sample_rate, stride=stride, n_q=n_q,
        codebook_size=codebook_size, frame_count=frame_count,
        num_samples=num_samples, rms_gain=float(rms_gain), mode=TAG_MODES[mode_tag],
        version=version,
    )
    used_bits = frame_count * n_q * bits
    all_bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="big")
    if np.any(all_bits[used_bits:]):
        raise FormatError("padding bits after the token payload must be zero")
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.uint64))
    values = all_bits[:used_bits].reshape(-1, bits).astype(np.uint64) @ weights
    tokens = TokenMatrix(values.reshape(frame_count, n_q).T.astype(np.int64))
    return header, tokens


def compute_tkr(sample_rate: int, stride: int, n_q: int) -> float:
    """Token rate: tokens per second of speech, normalized to a 16 kHz basis.

    Rescaling the stride to 16 kHz and dividing it into 16000 is the same as
    frames-per-second times stages, so the value is invariant under a
    declared-rate change that scales the stride proportionally.
    """
    if sample_rate <= 0 or stride <= 0 or n_q < 1:
        raise InvalidInputError(
            f"need positive rate/stride and n_q >= 1, got {sample_rate}, {stride}, {n_q}"
        )
    stride_at_reference = stride * REFERENCE_RATE / sample_rate
    return REFERENCE_RATE / stride_at_reference * n_q


def bits_per_second(tkr: float, codebook_size: int) -> float:
    """Bitrate implied by a token rate and codebook size."""
    if tkr < 0:
        raise InvalidInputError(f"token rate must be non-negative, got {tkr}")
    return tkr * _bits_per_token(codebook_size)
