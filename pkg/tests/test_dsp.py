import numpy as np
import pytest

from sslvc import dsp
from sslvc.errors import ConfigError, InputError
from sslvc.fixtures import default_voices, synth_utterance

SR = dsp.SAMPLE_RATE


def sine(freq, n=SR, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def speechlike(seed=0, seconds=1.0):
    voice, _ = default_voices(1)
    return synth_utterance(voice, seconds, np.random.default_rng(seed))


def test_frame_count_formula():
    assert dsp.extract_mel(np.zeros(16000) + 1e-3).frames.shape == (101, 80)
    for n in (160, 161, 1000, 4321):
        assert dsp.extract_mel(sine(300, n)).n_frames == n // 160 + 1


def test_silence_is_log_floor():
    mel = dsp.extract_mel(np.zeros(16000)).frames
    assert np.all(mel == np.float32(np.log(dsp.LOG_FLOOR)))


def test_sine_peak_bin_matches_filterbank_geometry():
    # independent oracle: rebuild the Slaney mel grid from its closed form
    f_sp, brk = 200.0 / 3, 1000.0
    step = np.log(6.4) / 27.0

    def to_mel(f):
        return f / f_sp if f < brk else brk / f_sp + np.log(f / brk) / step

    def to_hz(m):
        return f_sp * m if m < brk / f_sp else brk * np.exp(step * (m - brk / f_sp))

    edges = [to_hz(m) for m in np.linspace(0, to_mel(8000.0), 82)]
    containing = [i for i in range(80) if edges[i] < 440.0 < edges[i + 2]]
    # of the (up to two) overlapping filters, the one whose centre is nearest wins
    expected = min(containing, key=lambda i: abs(edges[i + 1] - 440.0))

    mel = dsp.extract_mel(sine(440.0)).frames
    peaks = np.argmax(mel[5:-5], axis=1)
    assert np.all(peaks == expected)


def test_mel_shift_covariance():
    x = speechlike(1)
    a = dsp.extract_mel(x).frames
    b = dsp.extract_mel(np.concatenate([np.zeros(dsp.HOP), x])).frames
    # interior frames (away from reflection padding) shift by exactly one
    np.testing.assert_allclose(b[10:-10], a[9:-10], atol=1e-4)


def test_mel_rejects_bad_input():
    with pytest.raises(InputError):
        dsp.extract_mel(np.array([]))
    with pytest.raises(InputError):
        dsp.extract_mel(np.array([0.0, np.nan]))


def test_time_stretch_identity_and_lengths():
    x = speechlike(2)
    assert np.array_equal(dsp.time_stretch(x, 1.0), x)
    assert abs(dsp.time_stretch(sine(300), 0.8).size - 20000) <= 512
    assert abs(dsp.time_stretch(sine(300), 1.2).size - 16000 / 1.2) <= 512
    with pytest.raises(ConfigError):
        dsp.time_stretch(x, 1.3)


def test_time_stretch_preserves_pitch():
    y = dsp.time_stretch(sine(440.0), 1.2)
    spec = np.abs(np.fft.rfft(y * np.hanning(y.size)))
    freqs = np.fft.rfftfreq(y.size, 1 / SR)
    assert abs(freqs[np.argmax(spec)] - 440.0) <= 5.0


def test_f0_of_sawtooth():
    t = np.arange(SR) / SR
    saw = 0.5 * (2 * ((200 * t) % 1.0) - 1.0)
    track = dsp.extract_prosody(saw)
    assert abs(np.median(track.f0_hz[track.voiced_mask]) - 200.0) <= 4.0


def test_prosody_silence_and_energy_linearity():
    assert not dsp.extract_prosody(np.zeros(8000)).voiced_mask.any()
    x = speechlike(3)
    a, b = dsp.extract_prosody(x), dsp.extract_prosody(2 * x)
    np.testing.assert_allclose(b.energy, 2 * a.energy, rtol=1e-12)
    assert len(a.f0_hz) == len(a.energy) == dsp.extract_mel(x).n_frames
    assert np.array_equal(a.f0_hz > 0, a.voiced_mask)
    assert np.all(a.energy >= 0)


@pytest.fixture(scope="module")
def gl_sample():
    x = speechlike(4)
    return dsp.extract_mel(x).frames


def test_griffin_lim_loop_error(gl_sample):
    y = dsp.griffin_lim(gl_sample, iterations=64)
    assert abs(y.size - gl_sample.shape[0] * dsp.HOP) <= dsp.HOP
    err = np.abs(dsp.extract_mel(y).frames - gl_sample).mean()
    assert err < 0.5


def test_griffin_lim_more_iterations_no_worse(gl_sample):
    e8 = np.abs(dsp.extract_mel(dsp.griffin_lim(gl_sample, 8)).frames - gl_sample).mean()
    e64 = np.abs(dsp.extract_mel(dsp.griffin_lim(gl_sample, 64)).frames - gl_sample).mean()
    assert e64 <= e8


def test_griffin_lim_floor_is_silent_and_deterministic(gl_sample):
    floor = np.full((40, 80), np.log(dsp.LOG_FLOOR), dtype=np.float32)
    assert np.abs(dsp.griffin_lim(floor, 8)).max() < 1e-2
    assert np.array_equal(dsp.griffin_lim(gl_sample, 4, seed=1), dsp.griffin_lim(gl_sample, 4, seed=1))


def test_wav_round_trip(tmp_path):
    x = speechlike(5)
    dsp.save_wav(tmp_path / "a.wav", x)
    y = dsp.load_wav(tmp_path / "a.wav")
    assert y.size == x.size
    assert np.max(np.abs(x - y)) < 1e-4
