import json

import numpy as np
import pytest

from fdcodec import bitstream, cli
from fdcodec.audio import AudioBuffer, read_wav, write_wav
from fdcodec.codec import SEGMENT_SECONDS, SpeechCodec, segment_length, split_segments
from fdcodec.dsp import MODE_MAG_PHASE
from fdcodec.errors import InvalidInputError
from fdcodec.model import ModelConfig, fit_codebooks
from fdcodec.quantizer import TokenMatrix

CFG = ModelConfig(mode=MODE_MAG_PHASE, channels=8, code_dim=16,
                  num_quantizers=4, codebook_size=32, seed=5)


def clips(count, seconds=1.0, start_seed=40):
    out = []
    for i in range(count):
        gen = np.random.default_rng(start_seed + i)
        n = int(seconds * 16000)
        x = 0.08 * np.sin(2 * np.pi * (200 + 60 * i) * np.arange(n) / 16000)
        x += 0.02 * gen.standard_normal(n)
        out.append(AudioBuffer(samples=x, sample_rate=16000))
    return out


@pytest.fixture(scope="module")
def fitted():
    # full-length clips: a 50-frame corpus is memorized outright by the
    # 4x32 codes and the later stages collapse to zero
    stack, _ = fit_codebooks(CFG, clips(3, seconds=3.2), steps=1)
    return SpeechCodec(CFG, stack)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, fitted):
    d = tmp_path_factory.mktemp("cliwork")
    (d / "model.json").write_text(CFG.to_json())
    (d / "cb.fcq").write_bytes(fitted.stack.serialize())
    wavs = d / "wavs"
    wavs.mkdir()
    for i, c in enumerate(clips(4)):
        write_wav(wavs / f"clip{i}.wav", c)
    return d


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out)


# --- segmentation ---

def test_segment_length():
    assert SEGMENT_SECONDS == pytest.approx(3.2)
    assert segment_length(16000) == 51200


def test_split_segments_pads_last():
    parts = split_segments(np.arange(60000, dtype=np.float64), 51200)
    assert len(parts) == 2
    assert len(parts[0]) == len(parts[1]) == 51200
    assert np.all(parts[1][60000 - 51200:] == 0)


def test_split_segments_exact_fit():
    parts = split_segments(np.ones(51200), 51200)
    assert len(parts) == 1


# --- codec round trips ---

def test_round_trip_preserves_length(fitted):
    for seconds in (0.37, 1.0, 3.2, 4.5):
        buf = clips(1, seconds=seconds)[0]
        out = fitted.decode(fitted.encode(buf, None), None)
        assert len(out) == len(buf)
        assert out.sample_rate == 16000
        assert np.all(np.isfinite(out.samples))


def test_encode_header_contents(fitted):
    buf = clips(1, seconds=3.2)[0]
    header, tokens = bitstream.unpack(fitted.encode(buf, None))
    assert header.stride == CFG.waveform_stride
    assert header.n_q == 4
    assert header.codebook_size == 32
    assert header.num_samples == 51200
    assert header.frame_count == 51200 // CFG.waveform_stride
    assert tokens.indices.shape == (4, header.frame_count)


def test_encode_nq_subset(fitted):
    buf = clips(1)[0]
    header, tokens = bitstream.unpack(fitted.encode(buf, 2))
    assert header.n_q == 2
    assert tokens.num_stages == 2
    # the first rows match the full encoding (residual structure)
    full_h, full_t = bitstream.unpack(fitted.encode(buf, None))
    assert np.array_equal(tokens.indices, full_t.indices[:2])


def test_decode_prefix_rows(fitted):
    buf = clips(1)[0]
    data = fitted.encode(buf, None)
    full = fitted.decode(data, None)
    partial = fitted.decode(data, 2)
    assert len(partial) == len(full)
    assert not np.array_equal(partial.samples, full.samples)


def test_decode_nq_too_large(fitted):
    data = fitted.encode(clips(1)[0], 2)
    with pytest.raises(InvalidInputError):
        fitted.decode(data, 3)


def test_silence_round_trip(fitted):
    buf = AudioBuffer(samples=np.zeros(16000), sample_rate=16000)
    data = fitted.encode(buf, None)
    header, _ = bitstream.unpack(data)
    assert header.rms_gain == 1.0
    out = fitted.decode(data, None)
    assert len(out) == 16000
    assert np.all(np.isfinite(out.samples))


def test_decode_rejects_foreign_header(fitted):
    other = ModelConfig(mode=MODE_MAG_PHASE, channels=8, code_dim=16,
                        num_quantizers=4, codebook_size=32,
                        strides=(1, 1, 2, 2), seed=5)
    h = bitstream.CodecHeader(sample_rate=16000, stride=other.waveform_stride,
                              n_q=4, codebook_size=32, frame_count=2,
                              num_samples=1280, rms_gain=1.0, mode="mag_phase")
    data = bitstream.pack(h, TokenMatrix(np.zeros((4, 2), dtype=np.int64)))
    with pytest.raises(InvalidInputError, match="stride"):
        fitted.decode(data, None)


def test_tampered_payload_never_crashes(fitted):
    data = bytearray(fitted.encode(clips(1, seconds=0.5)[0], None))
    gen = np.random.default_rng(3)
    for _ in range(20):
        blob = bytearray(data)
        pos = int(gen.integers(bitstream.HEADER_SIZE, len(blob)))
        blob[pos] ^= 0xFF
        try:
            out = fitted.decode(bytes(blob), None)
            assert np.all(np.isfinite(out.samples))
        except bitstream.FormatError:
            pass


# --- command line ---

def test_cli_encode_decode_round_trip(workdir, capsys):
    code, summary = run_cli(capsys, "encode", str(workdir / "wavs"),
                            "--config", str(workdir / "model.json"),
                            "--codebooks", str(workdir / "cb.fcq"),
                            "--out", str(workdir / "enc"))
    assert code == 0
    assert summary["failed"] == 0
    assert len(summary["results"]) == 4
    first = summary["results"][0]
    assert first["frames"] == 160  # 1 s pads to one 3.2 s segment
    assert first["tkr"] == pytest.approx(200.0)
    assert first["bits_per_second"] == pytest.approx(1000.0)

    code, summary = run_cli(capsys, "decode", str(workdir / "enc"),
                            "--config", str(workdir / "model.json"),
                            "--codebooks", str(workdir / "cb.fcq"),
                            "--out", str(workdir / "dec"))
    assert code == 0
    assert summary["failed"] == 0
    for r in summary["results"]:
        assert r["samples"] == 16000
    back = read_wav(workdir / "dec" / "clip0.wav")
    assert len(back) == 16000


def test_cli_worker_determinism(workdir, capsys):
    for workers, out in (("1", "enc_w1"), ("4", "enc_w4")):
        code, _ = run_cli(capsys, "encode", str(workdir / "wavs"),
                          "--config", str(workdir / "model.json"),
                          "--codebooks", str(workdir / "cb.fcq"),
                          "--out", str(workdir / out), "--workers", workers)
        assert code == 0
    for i in range(4):
        a = (workdir / "enc_w1" / f"clip{i}.fcs").read_bytes()
        b = (workdir / "enc_w4" / f"clip{i}.fcs").read_bytes()
        assert a == b


def test_cli_inspect(workdir, capsys):
    run_cli(capsys, "encode", str(workdir / "wavs" / "clip0.wav"),
            "--config", str(workdir / "model.json"),
            "--codebooks", str(workdir / "cb.fcq"),
            "--out", str(workdir / "enc_i"))
    code, summary = run_cli(capsys, "inspect", str(workdir / "enc_i" / "clip0.fcs"))
    assert code == 0
    r = summary["results"][0]
    assert r["frames"] == 160
    assert r["n_q"] == 4
    assert r["tkr"] == pytest.approx(bitstream.compute_tkr(16000, r["stride"], r["n_q"]))
    for h in r["token_histograms"]:
        assert sum(h["counts"].values()) == r["frames"]


def test_cli_partial_failure_exit_code(workdir, capsys, tmp_path):
    missing = tmp_path / "missing.wav"
    code, summary = run_cli(capsys, "encode", str(workdir / "wavs" / "clip0.wav"),
                            str(missing),
                            "--config", str(workdir / "model.json"),
                            "--codebooks", str(workdir / "cb.fcq"),
                            "--out", str(workdir / "enc_p"))
    assert code == 1
    assert summary["failed"] == 1
    errors = [r for r in summary["results"] if r.get("error")]
    assert len(errors) == 1
    assert str(missing) in errors[0]["input"]


def test_cli_config_errors(workdir, capsys):
    code, summary = run_cli(capsys, "encode", str(workdir / "wavs"))
    assert code == 2
    assert "config" in summary["error"] or "preset" in summary["error"]
    code, _ = run_cli(capsys, "encode", str(workdir / "wavs"),
                      "--config", str(workdir / "model.json"),
                      "--preset", "base",
                      "--codebooks", str(workdir / "cb.fcq"))
    assert code == 2


def test_cli_bad_preset_is_argparse_error(workdir):
    with pytest.raises(SystemExit) as exc:
        cli.main(["encode", "x.wav", "--preset", "nosuch"])
    assert exc.value.code == 2


def test_cli_fit_codebooks(workdir, capsys):
    out = workdir / "fitted.fcq"
    code, summary = run_cli(capsys, "fit-codebooks", str(workdir / "wavs"),
                            "--config", str(workdir / "model.json"),
                            "--steps", "1", "--out", str(out))
    assert code == 0
    assert out.exists()
    assert summary["files"] == 4
    rep = summary["report"]
    assert len(rep["utilization"]) == 4
    assert all(0.0 <= u <= 1.0 for u in rep["utilization"])
    mses = rep["residual_mse"]
    assert all(b <= a + 1e-9 for a, b in zip(mses, mses[1:]))


def test_cli_eval_losses(workdir, capsys):
    ref = workdir / "wavs" / "clip0.wav"
    code, summary = run_cli(capsys, "eval-losses", str(ref), str(ref))
    assert code == 0
    L = summary["losses"]
    assert L["l_t"] == 0.0
    assert L["l_f"] == 0.0
    assert L["l_adv"] == 0.0 and L["l_feat"] == 0.0 and L["l_cm"] == 0.0
    assert L["total"] == 0.0
    assert len(L["per_scale"]) == 7


def test_cli_eval_losses_halved(workdir, capsys, tmp_path):
    ref = read_wav(workdir / "wavs" / "clip1.wav")
    half = tmp_path / "half.wav"
    write_wav(half, AudioBuffer(samples=0.5 * ref.samples, sample_rate=16000))
    code, summary = run_cli(capsys, "eval-losses",
                            str(workdir / "wavs" / "clip1.wav"), str(half))
    assert code == 0
    L = summary["losses"]
    # wav quantization keeps this from being exact arithmetic
    assert L["l_t"] == pytest.approx(np.mean(np.abs(0.5 * ref.samples)), rel=1e-2)
    assert L["l_f"] > 0.0


def test_cli_analyze_complexity(workdir, capsys):
    code, summary = run_cli(capsys, "analyze-complexity", "--preset", "m6")
    assert code == 0
    m6 = summary["report"]["total_params"]
    code, summary = run_cli(capsys, "analyze-complexity", "--preset", "m4")
    m4 = summary["report"]["total_params"]
    assert code == 0
    assert m6 < m4


def test_cli_seed_override(workdir, capsys):
    # a different weight seed changes the token stream
    args = ["encode", str(workdir / "wavs" / "clip0.wav"),
            "--config", str(workdir / "model.json"),
            "--codebooks", str(workdir / "cb.fcq")]
    code, _ = run_cli(capsys, *args, "--out", str(workdir / "enc_s5"), "--seed", "5")
    assert code == 0
    code, _ = run_cli(capsys, *args, "--out", str(workdir / "enc_s6"), "--seed", "6")
    assert code == 0
    a = (workdir / "enc_s5" / "clip0.fcs").read_bytes()
    b = (workdir / "enc_s6" / "clip0.fcs").read_bytes()
    assert a != b


def test_console_script_installed():
    import shutil
    import subprocess
    exe = shutil.which("fdcodec")
    assert exe is not None
    out = subprocess.run([exe, "analyze-complexity", "--preset", "m6"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout)["report"]["total_params"] > 0
