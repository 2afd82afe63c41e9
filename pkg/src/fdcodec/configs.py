"""Shipped model presets.

``base``, ``2x``, and ``4x`` trade frame rate for quantizer depth at a
fixed feature front end (window 512, hop 160): waveform strides 320, 640,
and 1280 samples per token frame.  ``m2`` through ``m7`` hold the stride at
320 and sweep the feature mode and convolution grouping, from ungrouped
(m2/m3) through one-sided and partial grouping (m4/m5, m7) to fully
depthwise mixers (m6).
"""

from __future__ import annotations

from dataclasses import replace

from .dsp import MODE_MAG_ANGLE, MODE_MAG_PHASE
from .errors import ConfigurationError
from .model import ModelConfig

_BASE = ModelConfig(
    mode=MODE_MAG_PHASE,
    channels=32,
    blocks=4,
    strides=(1, 1, 1, 2),
    groups_enc=1,
    groups_dec=1,
    code_dim=128,
    num_quantizers=8,
    codebook_size=1024,
)

PRESETS: dict[str, ModelConfig] = {
    "base": _BASE,
    "2x": replace(_BASE, strides=(1, 1, 2, 2), num_quantizers=16),
    "4x": replace(_BASE, strides=(1, 2, 2, 2), num_quantizers=32),
    "m2": replace(_BASE, mode=MODE_MAG_ANGLE),
    "m3": _BASE,
    "m4": replace(_BASE, groups_enc=1, groups_dec="cin"),
    "m5": replace(_BASE, groups_enc=1, groups_dec="cin/8"),
    "m6": replace(_BASE, groups_enc="cin", groups_dec="cin"),
    "m7": replace(_BASE, groups_enc="cin/4", groups_dec="cin/4"),
}


def preset(name: str) -> ModelConfig:
    """Look up a preset by name."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None
