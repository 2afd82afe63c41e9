"""Frequency-domain neural speech codec.

The package splits into a numpy-only core (dsp, quantizer, losses,
bitstream, audio) and the torch-backed model stack (model, codec,
configs, cli).  Importing :mod:`fdcodec` alone never pulls in torch;
import :mod:`fdcodec.model` or :mod:`fdcodec.codec` explicitly when the
encoder and decoder networks are needed.
"""

from .audio import AudioBuffer, read_wav, rms_normalize, write_wav
from .bitstream import CodecHeader, pack, unpack
from .dsp import (
    FeatureMap,
    domain_invert,
    domain_transform,
    istft,
    stft,
)
from .errors import (
    CodecError,
    ConfigurationError,
    InvalidInputError,
    NumericError,
    StateError,
)
from .quantizer import QuantizerStack, TokenMatrix

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "CodecHeader",
    "CodecError",
    "ConfigurationError",
    "FeatureMap",
    "InvalidInputError",
    "NumericError",
    "QuantizerStack",
    "StateError",
    "TokenMatrix",
    "domain_invert",
    "domain_transform",
    "istft",
    "pack",
    "read_wav",
    "rms_normalize",
    "stft",
    "unpack",
    "write_wav",
]
