"""Batch command-line front end.

Subcommands: encode, decode, inspect, analyze-complexity, fit-codebooks,
eval-losses.  Machine-readable JSON goes to stdout, log lines to stderr
(level via the FUNCODEC_LOG environment variable).  Exit status: 0 on
success, 1 when some file failed, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bitstream
from .audio import read_wav, write_wav
from .codec import SpeechCodec
from .configs import PRESETS, preset
from .errors import CodecError, ConfigurationError
from .losses import DEFAULT_WEIGHTS, multiscale_spectral, time_l1, total_loss
from .model import ModelConfig, count_complexity, fit_codebooks
from .quantizer import deserialize_stack, serialize_stack

log = logging.getLogger("fdcodec")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _setup_logging() -> None:
    level_name = os.environ.get("FUNCODEC_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("fdcodec")
    root.handlers[:] = [handler]
    root.setLevel(level)


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _load_config(args) -> ModelConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigurationError("pass either --config or --preset, not both")
    cfg = None
    if getattr(args, "config", None):
        cfg = ModelConfig.from_file(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    if cfg is None:
        raise ConfigurationError("a model is required: pass --config FILE or --preset NAME")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_codec(args) -> SpeechCodec:
    cfg = _load_config(args)
    if not getattr(args, "codebooks", None):
        raise ConfigurationError("--codebooks FILE is required for this command")
    blob = Path(args.codebooks).read_bytes()
    stack = deserialize_stack(blob)
    return SpeechCodec(cfg, stack)


def _expand_inputs(paths, suffix: str) -> list:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix == suffix))
        else:
            out.append(p)
    if not out:
        raise ConfigurationError(f"no {suffix} inputs found")
    return sorted(dict.fromkeys(out))


def _out_path(args, source: Path, suffix: str) -> Path:
    out_dir = Path(args.out) if getattr(args, "out", None) else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / (source.stem + suffix)


def _run_batch(files, worker, workers: int) -> list:
    """Apply ``worker`` to every file; results keep the input order and a
    failure in one file never stops the rest."""
    def safe(path):
        try:
            return worker(path)
        except (CodecError, OSError) as exc:
            log.error("%s: %s", path, exc)
            return {"input": str(path), "error": str(exc)}

    if workers <= 1:
        return [safe(p) for p in files]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(safe, files))


def _limit_torch_threads() -> None:
    # one BLAS thread keeps results identical no matter how many worker
    # threads run forward passes concurrently
    import torch

    torch.set_num_threads(1)


def cmd_encode(args) -> int:
    _limit_torch_threads()
    codec = _load_codec(args)
    files = _expand_inputs(args.inputs, ".wav")

    def work(path: Path) -> dict:
        audio = read_wav(path, require_rate=codec.cfg.sample_rate)
        data = codec.encode(audio, args.nq)
        target = _out_path(args, path, ".fcs")
        target.write_bytes(data)
        header, _ = bitstream.unpack(data)
        log.info("encoded %s -> %s (%d frames)", path, target, header.frame_count)
        return {
            "input": str(path),
            "output": str(target),
            "frames": header.frame_count,
            "n_q": header.n_q,
            "tkr": header.tkr(),
            "bits_per_second": header.bits_per_second(),
            "error": None,
        }

    results = _run_batch(files, work, args.workers)
    failed = sum(1 for r in results if r.get("error"))
    _emit({"command": "encode", "results": results, "failed": failed})
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_decode(args) -> int:
    _limit_torch_threads()
    codec = _load_codec(args)
    files = _expand_inputs(args.inputs, ".fcs")

    def work(path: Path) -> dict:
        audio = codec.decode(path.read_bytes(), args.nq)
        target = _out_path(args, path, ".wav")
        write_wav(target, audio)
        log.info("decoded %s -> %s (%d samples)", path, target, len(audio))
        return {
            "input": str(path),
            "output": str(target),
            "samples": len(audio),
            "error": None,
        }

    results = _run_batch(files, work, args.workers)
    failed = sum(1 for r in results if r.get("error"))
    _emit({"command": "decode", "results": results, "failed": failed})
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_inspect(args) -> int:
    files = _expand_inputs(args.inputs, ".fcs")

    def work(path: Path) -> dict:
        header, tokens = bitstream.unpack(path.read_bytes())
        histograms = []
        for q in range(tokens.num_stages):
            values, counts = np.unique(tokens.indices[q], return_counts=True)
            histograms.append({
                "quantizer": q,
                "unique_codes": int(len(values)),
                "counts": {str(int(v)): int(c) for v, c in zip(values, counts)},
            })
        return {
            "input": str(path),
            "sample_rate": header.sample_rate,
            "stride": header.stride,
            "n_q": header.n_q,
            "codebook_size": header.codebook_size,
            "frames": header.frame_count,
            "num_samples": header.num_samples,
            "rms_gain": header.rms_gain,
            "mode": header.mode,
            "tkr": header.tkr(),
            "bits_per_second": header.bits_per_second(),
            "token_histograms": histograms,
            "error": None,
        }

    results = _run_batch(files, work, workers=1)
    failed = sum(1 for r in results if r.get("error"))
    _emit({"command": "inspect", "results": results, "failed": failed})
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_analyze_complexity(args) -> int:
    cfg = _load_config(args)
    report = count_complexity(cfg)
    _emit({"command": "analyze-complexity",
           "report": report.to_dict(flops_per_mac=args.flops_per_mac)})
    return EXIT_OK


def cmd_fit_codebooks(args) -> int:
    _limit_torch_threads()
    cfg = _load_config(args)
    files = _expand_inputs(args.inputs, ".wav")
    corpus = [read_wav(p, require_rate=cfg.sample_rate) for p in files]
    stack, report = fit_codebooks(cfg, corpus, steps=args.steps, seed=args.seed)
    target = Path(args.out) if args.out else Path.cwd() / "codebooks.fcq"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize_stack(stack))
    log.info("wrote codebooks to %s", target)
    _emit({
        "command": "fit-codebooks",
        "output": str(target),
        "files": len(files),
        "report": report.to_dict(),
    })
    return EXIT_OK


def cmd_eval_losses(args) -> int:
    reference = read_wav(args.reference)
    estimate = read_wav(args.estimate)
    spectral = multiscale_spectral(reference, estimate)
    report = total_loss(
        time=time_l1(reference, estimate),
        spectral=spectral.total,
        adversarial=0.0,
        feature=0.0,
        commit=0.0,
        weights=DEFAULT_WEIGHTS,
        per_scale=spectral.per_scale,
    )
    _emit({"command": "eval-losses", "reference": str(args.reference),
           "estimate": str(args.estimate), "losses": report.to_dict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdcodec",
        description="Frequency-domain neural speech codec: encode, decode, and "
                    "inspect token streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p, codebooks: bool):
        p.add_argument("--config", help="model config JSON file")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="named model preset")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's weight seed")
        if codebooks:
            p.add_argument("--codebooks", help="fitted codebook blob (.fcq)")

    p = sub.add_parser("encode", help="encode WAV files to token streams")
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    add_model_flags(p, codebooks=True)
    p.add_argument("--nq", type=int, default=None, help="quantizer stages to emit")
    p.add_argument("--out", help="output directory (default: working directory)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker threads")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode token streams to WAV files")
    p.add_argument("inputs", nargs="+", help=".fcs files or directories")
    add_model_flags(p, codebooks=True)
    p.add_argument("--nq", type=int, default=None,
                   help="use only the first N token rows")
    p.add_argument("--out", help="output directory (default: working directory)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker threads")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="print stream headers and token statistics")
    p.add_argument("inputs", nargs="+", help=".fcs files or directories")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("analyze-complexity",
                       help="parameter and MAC counts for a model")
    add_model_flags(p, codebooks=False)
    p.add_argument("--flops-per-mac", type=int, choices=(1, 2), default=1,
                   help="report FLOPs as 1 or 2 per multiply-accumulate")
    p.set_defaults(func=cmd_analyze_complexity)

    p = sub.add_parser("fit-codebooks", help="fit quantizer codebooks on WAV files")
    p.add_argument("inputs", nargs="+", help="training WAV files or directories")
    add_model_flags(p, codebooks=False)
    p.add_argument("--steps", type=int, default=0,
                   help="EMA update batches after k-means initialization")
    p.add_argument("--out", help="output blob path (default: ./codebooks.fcq)")
    p.set_defaults(func=cmd_fit_codebooks)

    p = sub.add_parser("eval-losses",
                       help="reconstruction losses between two equal-length WAVs")
    p.add_argument("reference", help="reference WAV")
    p.add_argument("estimate", help="estimate WAV")
    p.set_defaults(func=cmd_eval_losses)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_CONFIG
    except CodecError as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_PARTIAL
    except OSError as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
