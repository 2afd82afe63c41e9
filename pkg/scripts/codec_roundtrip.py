"""Fit a small codec on one WAV (or synthetic noise) and round-trip it.

Reports stream geometry, payload size, and the waveform/spectral losses
between the input and its reconstruction.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from fdcodec.audio import AudioBuffer, read_wav, write_wav
from fdcodec.bitstream import HEADER_SIZE, unpack
from fdcodec.codec import SpeechCodec
from fdcodec.dsp import MODE_MAG_PHASE
from fdcodec.losses import multiscale_spectral, time_l1
from fdcodec.model import ModelConfig, fit_codebooks


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("wav", nargs="?", help="input WAV (16 kHz); noise if omitted")
    parser.add_argument("--seconds", type=float, default=3.2,
                        help="synthetic input length when no WAV is given")
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--nq", type=int, default=4)
    parser.add_argument("--codebook-size", type=int, default=64)
    parser.add_argument("--steps", type=int, default=4, help="EMA batches after init")
    parser.add_argument("--save", help="write the reconstruction to this WAV path")
    parser.add_argument("--seed", type=int, default=710)
    args = parser.parse_args()

    if args.wav:
        audio = read_wav(args.wav)
    else:
        rng = np.random.default_rng(args.seed)
        n = int(args.seconds * 16000)
        tone = 0.1 * np.sin(2 * np.pi * 220.0 * np.arange(n) / 16000)
        audio = AudioBuffer(tone + 0.02 * rng.standard_normal(n), 16000)

    cfg = ModelConfig(mode=MODE_MAG_PHASE, channels=args.channels, code_dim=16,
                      num_quantizers=args.nq, codebook_size=args.codebook_size,
                      seed=args.seed)
    stack, fit_report = fit_codebooks(cfg, [audio], steps=args.steps)
    codec = SpeechCodec(cfg, stack)

    data = codec.encode(audio)
    decoded = codec.decode(data)
    header, _ = unpack(data)

    print(f"input samples       {len(audio)}")
    print(f"stream bytes        {len(data)} (header {HEADER_SIZE})")
    print(f"frames x stages     {header.frame_count} x {header.n_q}")
    print(f"tokens per second   {header.tkr():.1f}")
    print(f"bits per second     {header.bits_per_second():.1f}")
    print(f"fit residual mse    {[f'{m:.3e}' for m in fit_report.residual_mse]}")
    print(f"waveform L1         {time_l1(audio, decoded):.5f}")
    print(f"spectral loss       {multiscale_spectral(audio, decoded).total:.4f}")

    if args.save:
        out = Path(args.save)
    else:
        out = Path(tempfile.gettempdir()) / "fdcodec_roundtrip.wav"
    write_wav(out, decoded)
    print(f"reconstruction      {out}")


if __name__ == "__main__":
    main()
