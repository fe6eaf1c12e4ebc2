import sys

import numpy as np
import pytest

from sslvc import dsp
from sslvc.errors import ConfigError, ExtractionError
from sslvc.ssl_frontend import ExtractorSpec, cache_key, extract, extract_cached, mock_features
from sslvc.tensorio import UtteranceRecord, read_tensor, write_tensor


def _tone(seconds=1.0, f0=180.0, seed=0):
    t = np.arange(int(seconds * dsp.SAMPLE_RATE)) / dsp.SAMPLE_RATE
    rng = np.random.default_rng(seed)
    return (0.3 * np.sin(2 * np.pi * f0 * t) + 0.01 * rng.standard_normal(t.size)).astype(np.float64)


def _record(tmp_path, wav=None, **kw):
    path = tmp_path / "a.wav"
    dsp.save_wav(path, _tone() if wav is None else wav)
    return UtteranceRecord(id="a", speaker="s", audio_path=str(path), **kw)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExtractorSpec(kind="hubert")
    with pytest.raises(ConfigError):
        ExtractorSpec(dim=0)
    with pytest.raises(ConfigError):
        ExtractorSpec(kind="external_command")
    with pytest.raises(ConfigError):
        ExtractorSpec(frame_rate_hz=30.0)  # does not divide the 100 Hz mel rate


def test_mock_frame_rate_contract():
    feats = mock_features(ExtractorSpec(dim=64), _tone(1.0))
    assert feats.shape[1] == 64
    assert feats.shape[0] in (49, 50, 51)
    assert feats.dtype == np.float32


def test_mock_is_bit_deterministic(tmp_path):
    spec = ExtractorSpec(dim=32)
    rec = _record(tmp_path)
    a, b = extract(spec, rec), extract(spec, rec)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, extract(ExtractorSpec(dim=32, mock_seed=7), rec))


def test_mock_keeps_speaker_statistics():
    spec = ExtractorSpec(dim=48)
    low = mock_features(spec, _tone(f0=110.0)).mean(axis=0)
    high = mock_features(spec, _tone(f0=260.0)).mean(axis=0)
    assert np.linalg.norm(low - high) > 0.1 * np.linalg.norm(low)


def test_precomputed_dim_mismatch(tmp_path):
    fp = tmp_path / "f.vctf"
    write_tensor(fp, np.zeros((20, 768), dtype=np.float32))
    rec = _record(tmp_path, feature_path=str(fp))
    with pytest.raises(ExtractionError):
        extract(ExtractorSpec(kind="precomputed", dim=256), rec)
    assert extract(ExtractorSpec(kind="precomputed", dim=768), rec).shape == (20, 768)
    with pytest.raises(ExtractionError):
        extract(ExtractorSpec(kind="precomputed", dim=768), _record(tmp_path))


SCRIPT = """
import sys
import numpy as np
from sslvc import dsp
from sslvc.tensorio import write_tensor
wav = dsp.load_wav(sys.argv[1])
n = len(wav) // 320
write_tensor(sys.argv[2], np.full((n, int(sys.argv[3])), float(len(wav)), dtype=np.float32))
"""


def _command(tmp_path, dim, extra=""):
    script = tmp_path / "extractor.py"
    script.write_text(SCRIPT + extra)
    return f"{sys.executable} {script} {{input_wav}} {{output_tensor}} {dim}"


def test_external_command_roundtrip(tmp_path):
    spec = ExtractorSpec(kind="external_command", dim=16, command_template=_command(tmp_path, 16))
    feats = extract(spec, _record(tmp_path))
    assert feats.shape == (50, 16)
    assert feats[0, 0] == 16000.0
    # an in-memory waveform goes through a temporary WAV
    assert extract(spec, _record(tmp_path), _tone(0.5)).shape == (25, 16)


def test_external_command_failures_carry_diagnostics(tmp_path):
    failing = ExtractorSpec(kind="external_command", dim=16,
                            command_template=_command(tmp_path, 16, "\nsys.stderr.write('boom')\nsys.exit(3)\n"))
    with pytest.raises(ExtractionError, match="boom"):
        extract(failing, _record(tmp_path))
    wrong_dim = ExtractorSpec(kind="external_command", dim=16, command_template=_command(tmp_path, 8))
    with pytest.raises(ExtractionError, match=r"\[T, 16\]"):
        extract(wrong_dim, _record(tmp_path))


def test_cache_is_keyed_by_audio_and_spec(tmp_path):
    spec = ExtractorSpec(dim=8)
    rec = _record(tmp_path)
    wav = _tone()
    path, hit = extract_cached(spec, rec, wav, tmp_path / "cache")
    assert not hit and read_tensor(path).shape[1] == 8
    again, hit = extract_cached(spec, rec, wav, tmp_path / "cache")
    assert hit and again == path
    assert cache_key(spec, wav) != cache_key(spec, wav * 0.5)
    assert cache_key(spec, wav) != cache_key(ExtractorSpec(dim=9), wav)
