"""Objective conversion metrics: MCD with DTW, prosody RMSE, speaker cosine similarity."""

from __future__ import annotations

import dataclasses
import json
import math
import shlex
import subprocess
import tempfile
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .. import dsp
from ..errors import EvalError, InputError, ParameterError
from ..tensorio import read_tensor


MCD_ORDER = 13
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)


# -- MCD ------------------------------------------------------------------------

def mel_cepstrum(log_mel: np.ndarray, order: int = MCD_ORDER) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients 1..order (c0 dropped)."""
    c = dct(np.asarray(log_mel, dtype=np.float64), type=2, norm="ortho", axis=1)
    return c[:, 1:order + 1]


def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1)."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    c = cost.tolist()
    a = acc.tolist()
    for i in range(1, n + 1):
        ci, prev, cur = c[i - 1], a[i - 1], a[i]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = ci[j - 1] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        diag, up, left = a[i - 1][j - 1], a[i - 1][j], a[i][j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def mcd_cepstra(ca: np.ndarray, cb: np.ndarray, align: bool = True) -> float:
    """Mean per-frame distortion in dB between two cepstral sequences.

    Without ``align`` the frames are paired one-to-one (equal lengths required).
    """
    ca, cb = np.asarray(ca, dtype=np.float64), np.asarray(cb, dtype=np.float64)
    if align:
        cost = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1))
        path = dtw_path(cost)
        ia, ib = np.array(path).T
    else:
        if ca.shape != cb.shape:
            raise InputError("identity alignment needs equal-length sequences")
        ia = ib = np.arange(ca.shape[0])
    diff = ca[ia] - cb[ib]
    return float(np.mean(MCD_SCALE * np.sqrt((diff ** 2).sum(axis=1))))


def mcd(converted, target) -> float:
    for name, w in (("converted", converted), ("target", target)):
        if np.asarray(w).size < dsp.WIN_LENGTH:
            raise InputError(f"{name} waveform shorter than one analysis frame")
    ca = mel_cepstrum(dsp.extract_mel(converted).frames)
    cb = mel_cepstrum(dsp.extract_mel(target).frames)
    return mcd_cepstra(ca, cb)


# -- prosody RMSE ------------------------------------------------------------------

def minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("constant sequence in min-max normalisation; using zeros", stacklevel=2)
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def prosody_rmse(source: dsp.ProsodyTrack, converted: dsp.ProsodyTrack) -> tuple[float, float]:
    """(F0 RMSE, energy RMSE) after independent min-max normalisation.

    F0 is compared on frames voiced in both tracks (NaN if there are none);
    energy on every shared frame.
    """
    n = min(len(source.f0_hz), len(converted.f0_hz))
    va = np.asarray(source.voiced_mask[:n], dtype=bool)
    vb = np.asarray(converted.voiced_mask[:n], dtype=bool)

    fa = np.zeros(n)
    fb = np.zeros(n)
    fa[va] = minmax(np.asarray(source.f0_hz[:n])[va])
    fb[vb] = minmax(np.asarray(converted.f0_hz[:n])[vb])
    both = va & vb
    f0_rmse = float(np.sqrt(np.mean((fa[both] - fb[both]) ** 2))) if both.any() else float("nan")

    ea = minmax(source.energy[:n])
    eb = minmax(converted.energy[:n])
    energy_rmse = float(np.sqrt(np.mean((ea - eb) ** 2))) if n else float("nan")
    return f0_rmse, energy_rmse


# -- speaker similarity -------------------------------------------------------------

@dataclasses.dataclass
class SpeakerEmbedder:
    """``fallback_stats``: per-channel mean and std of the log-mel (2 * n_mels dims).

    ``external_command``: template with ``{input_wav}``/``{output_tensor}``
    placeholders producing a 1-D (or [1, dim]) tensor file.
    """

    kind: str = "fallback_stats"
    dim: int = 2 * dsp.N_MELS
    command_template: str | None = None

    def __post_init__(self):
        if self.kind not in ("fallback_stats", "external_command"):
            raise ParameterError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "external_command" and not self.command_template:
            raise ParameterError("external_command embedder needs command_template")

    def embed_mel(self, log_mel: np.ndarray) -> np.ndarray:
        if self.kind != "fallback_stats":
            raise EvalError("only the fallback embedder works on mels directly")
        m = np.asarray(log_mel, dtype=np.float64)
        return np.concatenate([m.mean(axis=0), m.std(axis=0)])

    def embed(self, waveform) -> np.ndarray:
        if self.kind == "fallback_stats":
            return self.embed_mel(dsp.extract_mel(waveform).frames)
        with tempfile.TemporaryDirectory() as tmp:
            wav = Path(tmp) / "input.wav"
            out = Path(tmp) / "embedding.vctf"
            dsp.save_wav(wav, waveform)
            cmd = self.command_template.format(input_wav=shlex.quote(str(wav)), output_tensor=shlex.quote(str(out)))
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
            if proc.returncode != 0 or not out.exists():
                raise EvalError(f"speaker embedder failed ({proc.returncode}): {cmd}\n{proc.stderr[-2000:]}")
            vec = read_tensor(out).reshape(-1).astype(np.float64)
        if vec.size != self.dim:
            raise EvalError(f"speaker embedder returned {vec.size} dims, expected {self.dim}")
        return vec


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvalError("zero-norm speaker embedding")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def cosine_similarity(embedder: SpeakerEmbedder, converted, target_reference) -> float:
    return cosine(embedder.embed(converted), embedder.embed(target_reference))


# -- report ---------------------------------------------------------------------------

@dataclasses.dataclass
class EvalReport:
    mcd_db: float
    cos_sim: float
    f0_rmse: float
    energy_rmse: float
    n_pairs: int

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("MCD (dB)", self.mcd_db), ("COS-SIM", self.cos_sim), ("Energy RMSE", self.energy_rmse),
                ("F0 RMSE", self.f0_rmse)]
        lines = [f"{'metric':<12} {'value':>9}", "-" * 22]
        lines += [f"{name:<12} {val:>9.4f}" for name, val in rows]
        lines.append(f"{'pairs':<12} {self.n_pairs:>9d}")
        return "\n".join(lines)


@dataclasses.dataclass
class PairResult:
    name: str
    mcd_db: float
    cos_sim: float
    f0_rmse: float
    energy_rmse: float


def evaluate_pair(name, converted, source, reference, embedder: SpeakerEmbedder,
                  target_reference=None) -> PairResult:
    """Metrics for one converted utterance.

    MCD against the parallel ``reference``; prosody against ``source``;
    COS-SIM against ``target_reference`` (defaults to ``reference``).
    """
    ref_for_sim = reference if target_reference is None else target_reference
    f0, en = prosody_rmse(dsp.extract_prosody(source), dsp.extract_prosody(converted))
    return PairResult(name=name, mcd_db=mcd(converted, reference),
                      cos_sim=cosine_similarity(embedder, converted, ref_for_sim),
                      f0_rmse=f0, energy_rmse=en)


def aggregate(results: Sequence[PairResult]) -> EvalReport:
    if not results:
        raise ParameterError("no converted utterances to evaluate")
    f0 = np.array([r.f0_rmse for r in results])
    if np.all(np.isnan(f0)):
        raise EvalError("no pair has frames voiced in both source and converted audio")
    report = EvalReport(
        mcd_db=float(np.mean([r.mcd_db for r in results])),
        cos_sim=float(np.mean([r.cos_sim for r in results])),
        f0_rmse=float(np.nanmean(f0)),
        energy_rmse=float(np.mean([r.energy_rmse for r in results])),
        n_pairs=len(results),
    )
    if not all(math.isfinite(v) for v in (report.mcd_db, report.cos_sim, report.f0_rmse, report.energy_rmse)):
        raise EvalError(f"non-finite metric in report {report}")
    return report
