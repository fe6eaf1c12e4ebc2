"""Integration seam for self-supervised feature extractors.

Three kinds are supported:

* ``external_command`` runs a user command per utterance; the template gets
  ``{input_wav}`` and ``{output_tensor}`` placeholders and must leave a
  [T_s, D] tensor file behind.
* ``precomputed`` reads the tensor already referenced by ``record.feature_path``.
* ``mock`` is a deterministic stand-in: log-mel average-pooled to the feature
  frame rate, then a fixed seeded random projection to D dims.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, ExtractionError
from .tensorio import UtteranceRecord, read_tensor, write_tensor

KINDS = ("external_command", "precomputed", "mock")


@dataclasses.dataclass
class ExtractorSpec:
    kind: str = "mock"
    dim: int = 256
    frame_rate_hz: float = 50.0
    command_template: str | None = None
    mock_seed: int = 1234

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"extractor kind must be one of {KINDS}, got {self.kind!r}")
        if self.dim <= 0:
            raise ConfigError("extractor dim must be > 0")
        if self.frame_rate_hz <= 0:
            raise ConfigError("frame_rate_hz must be > 0")
        if self.kind == "external_command" and not self.command_template:
            raise ConfigError("external_command extractor needs command_template")
        if self.kind == "mock":
            ratio = (dsp.SAMPLE_RATE / dsp.HOP) / self.frame_rate_hz
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ConfigError("mock extractor needs frame_rate_hz dividing the mel frame rate")

    def key(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def _mock_projection(spec: ExtractorSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.mock_seed)
    return (rng.standard_normal((dsp.N_MELS, spec.dim)) / np.sqrt(dsp.N_MELS)).astype(np.float32)


def mock_features(spec: ExtractorSpec, waveform: np.ndarray) -> np.ndarray:
    mel = dsp.extract_mel(waveform).frames
    pool = int(round((dsp.SAMPLE_RATE / dsp.HOP) / spec.frame_rate_hz))
    t = max(mel.shape[0] // pool, 1)
    if mel.shape[0] < pool:
        pooled = mel.mean(axis=0, keepdims=True)
    else:
        pooled = mel[: t * pool].reshape(t, pool, -1).mean(axis=1)
    return (pooled @ _mock_projection(spec)).astype(np.float32)


def _run_command(spec: ExtractorSpec, wav_path: str) -> np.ndarray:
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "features.vctf"
        cmd = spec.command_template.format(input_wav=shlex.quote(str(wav_path)),
                                           output_tensor=shlex.quote(str(out)))
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExtractionError(f"extractor exited with {proc.returncode}: {cmd}\n"
                                  f"stdout: {proc.stdout[-2000:]}\nstderr: {proc.stderr[-2000:]}")
        if not out.exists():
            raise ExtractionError(f"extractor wrote no output tensor: {cmd}\nstderr: {proc.stderr[-2000:]}")
        return read_tensor(out)


def _check_shape(spec: ExtractorSpec, feats: np.ndarray, source: str) -> np.ndarray:
    if feats.ndim != 2 or feats.shape[1] != spec.dim or feats.shape[0] < 1:
        raise ExtractionError(f"{source}: expected [T, {spec.dim}] features, got {list(feats.shape)}")
    return feats


def extract(spec: ExtractorSpec, record: UtteranceRecord, waveform: np.ndarray | None = None) -> np.ndarray:
    """Features [T_s, D] for one utterance; ``waveform`` overrides reading the record's audio."""
    if spec.kind == "precomputed":
        if not record.feature_path:
            raise ExtractionError(f"{record.id}: precomputed extractor requires feature_path")
        return _check_shape(spec, read_tensor(record.feature_path), record.feature_path)
    if spec.kind == "mock":
        if waveform is None:
            waveform = dsp.load_wav(record.audio_path)
        return _check_shape(spec, mock_features(spec, waveform), record.id)
    if waveform is not None:
        with tempfile.TemporaryDirectory() as tmp:
            wav = Path(tmp) / "input.wav"
            dsp.save_wav(wav, waveform)
            return _check_shape(spec, _run_command(spec, str(wav)), record.id)
    return _check_shape(spec, _run_command(spec, record.audio_path), record.id)


def cache_key(spec: ExtractorSpec, waveform: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(waveform, dtype=np.float64).tobytes())
    h.update(spec.key().encode())
    return h.hexdigest()[:20]


def extract_cached(spec: ExtractorSpec, record: UtteranceRecord, waveform: np.ndarray, cache_dir):
    """Extract with a content-addressed cache; returns (path, cache_hit)."""
    path = Path(cache_dir) / f"{cache_key(spec, waveform)}.vctf"
    if path.exists():
        return path, True
    feats = extract(spec, record, waveform)
    write_tensor(path, feats)
    return path, False
