"""Synthetic corpora for tests, demos and the desk-scale experiments.

Two generators live here:

* :func:`synth_utterance` renders speech-like audio (glottal pulse train
  through formant resonators, fricative noise, pauses) for a parametric
  speaker, and :func:`write_fixture_corpus` lays out a target corpus plus a
  multi-speaker external corpus on disk.
* :class:`FeatureWorld` produces feature/mel pairs directly, with speaker
  identity injected as a constant offset on the feature channels.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp

# (F1, F2, F3) in Hz for a handful of vowels
VOWELS = {
    "a": (730, 1090, 2440), "i": (270, 2290, 3010), "u": (300, 870, 2240),
    "e": (530, 1840, 2480), "o": (570, 840, 2410), "ae": (660, 1720, 2410),
}
FRICATIVES = {"s": (4000, 8000), "sh": (2000, 6000), "f": (1000, 7000)}


@dataclasses.dataclass
class SpeakerVoice:
    name: str
    f0_hz: float = 120.0
    formant_scale: float = 1.0
    tilt: float = 0.97
    breath: float = 0.01


def _resonator(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _voiced(n, f0, formants, voice: SpeakerVoice, rng, sr):
    t = np.arange(n) / sr
    vib = 1 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = np.cumsum(2 * np.pi * f0 * vib / sr) + rng.uniform(0, 2 * np.pi)
    src = 2 * ((phase / (2 * np.pi)) % 1.0) - 1.0  # sawtooth
    src = lfilter([1.0], [1.0, -voice.tilt], src) * (1 - voice.tilt)
    src += voice.breath * rng.standard_normal(n)
    out = np.zeros(n)
    for k, f in enumerate(formants):
        b, a = _resonator(f * voice.formant_scale, 60 + 40 * k, sr)
        out += lfilter(b, a, src) / (k + 1)
    return out


def _fricative(n, band, rng, sr):
    noise = rng.standard_normal(n)
    lo, hi = band
    centre = 0.5 * (lo + hi)
    b, a = _resonator(min(centre, sr / 2 - 100), hi - lo, sr)
    return 0.3 * lfilter(b, a, noise)


def synth_utterance(voice: SpeakerVoice, seconds: float, rng: np.random.Generator,
                    sr: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Render roughly ``seconds`` of speech-like audio, peak-normalised to 0.5."""
    total = int(seconds * sr)
    pieces = []
    length = 0
    fade = int(0.005 * sr)
    vowels = list(VOWELS.values())
    frics = list(FRICATIVES.values())
    pieces.append(np.zeros(int(rng.uniform(0.05, 0.12) * sr)))
    length += pieces[-1].size
    while length < total:
        kind = rng.choice(["v", "v", "v", "f", "p"], p=[0.3, 0.3, 0.2, 0.12, 0.08])
        n = int(rng.uniform(0.06, 0.2) * sr)
        if kind == "v":
            f0 = voice.f0_hz * rng.uniform(0.85, 1.2)
            seg = _voiced(n, f0, vowels[rng.integers(len(vowels))], voice, rng, sr)
        elif kind == "f":
            seg = _fricative(n, frics[rng.integers(len(frics))], rng, sr)
        else:
            seg = np.zeros(n // 2)
        env = np.ones(seg.size)
        k = min(fade, seg.size // 2)
        if k:
            env[:k] = np.linspace(0, 1, k)
            env[-k:] = np.linspace(1, 0, k)
        pieces.append(seg * env)
        length += seg.size
    x = np.concatenate(pieces)[:total]
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


def default_voices(n_external: int = 2):
    target = SpeakerVoice("target", f0_hz=210.0, formant_scale=1.12, tilt=0.95)
    externals = [SpeakerVoice(f"ext{i:02d}", f0_hz=100.0 + 25.0 * i, formant_scale=0.9 + 0.04 * i,
                              tilt=0.97 + 0.005 * (i % 3)) for i in range(n_external)]
    return target, externals


def write_fixture_corpus(root, n_target: int = 12, n_external_speakers: int = 2, n_per_external: int = 6,
                         seconds: tuple = (1.0, 1.6), seed: int = 0) -> tuple[Path, Path]:
    """Write ``root/target/*.wav`` and ``root/external/<speaker>/*.wav``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    target_voice, ext_voices = default_voices(n_external_speakers)
    tdir, edir = root / "target", root / "external"
    tdir.mkdir(parents=True, exist_ok=True)
    for i in range(n_target):
        dsp.save_wav(tdir / f"utt{i:03d}.wav", synth_utterance(target_voice, rng.uniform(*seconds), rng))
    for voice in ext_voices:
        sdir = edir / voice.name
        sdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_external):
            dsp.save_wav(sdir / f"utt{i:03d}.wav", synth_utterance(voice, rng.uniform(*seconds), rng))
    return tdir, edir


# -- feature-level world ----------------------------------------------------------

@dataclasses.dataclass
class FeatureWorld:
    """Phone-sequence generator producing (features, mel) pairs.

    Every phone has a feature prototype and a log-mel template.  A speaker's
    features are the content trajectory plus that speaker's constant channel
    offset; mels are rendered in the target voice from content alone.
    """

    dim: int = 32
    n_phones: int = 10
    n_mels: int = dsp.N_MELS
    factor: int = 2
    offset_scale: float = 3.0
    offset_channels: int = 8
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.prototypes = rng.standard_normal((self.n_phones, self.dim))
        bins = np.arange(self.n_mels)
        templates = []
        for _ in range(self.n_phones):
            centres = np.sort(rng.uniform(5, self.n_mels - 5, size=3))
            env = sum(rng.uniform(1.5, 3.5) * np.exp(-0.5 * ((bins - c) / rng.uniform(2, 6)) ** 2) for c in centres)
            templates.append(env - 6.0 - 0.03 * bins)
        self.mel_templates = np.array(templates)
        self._speaker_offsets: dict[str, np.ndarray] = {}

    def speaker_offset(self, speaker: str) -> np.ndarray:
        if speaker not in self._speaker_offsets:
            h = int.from_bytes(hashlib.sha256(speaker.encode()).digest()[:4], "little")
            rng = np.random.default_rng([self.seed, h])
            off = np.zeros(self.dim)
            ch = rng.choice(self.dim, size=self.offset_channels, replace=False)
            off[ch] = self.offset_scale * rng.choice([-1.0, 1.0], size=self.offset_channels)
            self._speaker_offsets[speaker] = off
        return self._speaker_offsets[speaker]

    def set_offset(self, speaker: str, offset: np.ndarray) -> None:
        self._speaker_offsets[speaker] = np.asarray(offset, dtype=np.float64)

    def utterance(self, speaker: str, n_frames: int, rng: np.random.Generator):
        """(features [n_frames, dim], mel [factor * n_frames, n_mels]) as float32."""
        labels = []
        while len(labels) < n_frames:
            labels += [int(rng.integers(self.n_phones))] * int(rng.integers(3, 9))
        labels = np.array(labels[:n_frames])
        content = self.prototypes[labels]
        # light smoothing across phone boundaries
        kernel = np.array([0.25, 0.5, 0.25])
        padded = np.pad(content, ((1, 1), (0, 0)), mode="edge")
        content = sum(k * padded[i:i + n_frames] for i, k in enumerate(kernel))
        feats = content + self.speaker_offset(speaker) + self.noise * rng.standard_normal(content.shape)

        mel_lab = np.repeat(labels, self.factor)
        mel = self.mel_templates[mel_lab]
        padded = np.pad(mel, ((1, 1), (0, 0)), mode="edge")
        mel = sum(k * padded[i:i + mel.shape[0]] for i, k in enumerate(kernel))
        return feats.astype(np.float32), mel.astype(np.float32)
