"""Signal processing: log-mel analysis, rate augmentation, prosody, Griffin-Lim."""

from __future__ import annotations

import dataclasses
import logging
import struct
from functools import lru_cache
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_FFT = 1024
WIN_LENGTH = 1024
HOP = 160
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5

AUGMENT_RATES = (0.8, 0.9, 1.0, 1.1, 1.2)


@dataclasses.dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T_m, n_mels], natural-log amplitude
    hop_s: float = HOP / SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclasses.dataclass
class ProsodyTrack:
    f0_hz: np.ndarray
    energy: np.ndarray
    voiced_mask: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """[T, 2] matrix (f0, energy) for storage as a tensor file."""
        return np.stack([self.f0_hz, self.energy], axis=1).astype(np.float32)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "ProsodyTrack":
        f0 = np.asarray(m[:, 0], dtype=np.float64)
        return cls(f0_hz=f0, energy=np.asarray(m[:, 1], dtype=np.float64), voiced_mask=f0 > 0)


# -- audio io -----------------------------------------------------------------

def load_wav(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a WAV as float64 mono in [-1, 1], resampled to ``sample_rate``."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError, EOFError, struct.error) as exc:
        raise InputError(f"unreadable audio {path}: {exc}") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if sr != sample_rate:
        g = gcd(sr, sample_rate)
        x = resample_poly(x, sample_rate // g, sr // g)
    return x


def save_wav(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, np.round(x * 32767.0).astype(np.int16))


def _check_waveform(waveform) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InputError("waveform must be a non-empty 1-D array")
    if not np.all(np.isfinite(x)):
        raise InputError("waveform contains non-finite samples")
    return x


# -- mel analysis -------------------------------------------------------------

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular, area-normalised filters; shape [n_mels, n_fft // 2 + 1]."""
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    w = np.hanning(n + 1)[:-1]  # periodic
    w.setflags(write=False)
    return w


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered STFT with reflection padding; returns [T, n_fft//2+1] complex."""
    pad = n_fft // 2
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = 1 + (xp.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * _hann(n_fft)[None, :], axis=1)


def istft(spec: np.ndarray, length: int, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * _hann(n_fft)[None, :]
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = _hann(n_fft) ** 2
    for i in range(n_frames):
        s = i * hop
        out[s:s + n_fft] += frames[i]
        norm[s:s + n_fft] += win_sq
    out /= np.maximum(norm, 1e-8)
    pad = n_fft // 2
    out = out[pad:pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def n_mel_frames(n_samples: int, hop: int = HOP) -> int:
    return n_samples // hop + 1


def mel_from_magnitude(mag: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(mag @ mel_filterbank().T, LOG_FLOOR))


def extract_mel(waveform) -> MelSpectrogram:
    """Log-mel spectrogram, T_m = len // hop + 1 frames."""
    x = _check_waveform(waveform)
    mag = np.abs(stft(x))
    return MelSpectrogram(frames=mel_from_magnitude(mag).astype(np.float32))


# -- speaking-rate augmentation -------------------------------------------------

def time_stretch(waveform, rate: float, frame: int = 512, hop_out: int = 256, tolerance: int = 160) -> np.ndarray:
    """Pitch-preserving WSOLA time stretch; output length is round(len / rate).

    rate > 1 speeds speech up (shorter output).
    """
    if not 0.8 <= rate <= 1.2:
        raise ConfigError(f"rate {rate} outside [0.8, 1.2]")
    x = _check_waveform(waveform)
    if rate == 1.0:
        return x.copy()
    out_len = int(round(x.size / rate))
    win = _hann(frame)
    hop_in = hop_out * rate
    # pad so every analysis window (with search slack) stays inside the signal
    xp = np.pad(x, (frame, frame + tolerance + int(np.ceil(hop_in)) * 2))
    n_out_frames = int(np.ceil(out_len / hop_out)) + 2
    out = np.zeros(n_out_frames * hop_out + frame)
    norm = np.zeros_like(out)
    prev_pos = frame  # input position (in padded coords) of previously copied frame
    for k in range(n_out_frames):
        nominal = int(round(frame + k * hop_in))
        if k == 0:
            pos = nominal
        else:
            # natural continuation of the previous frame
            target = xp[prev_pos + hop_out: prev_pos + hop_out + frame]
            lo = max(nominal - tolerance, 0)
            hi = min(nominal + tolerance, xp.size - frame)
            if hi <= lo or target.size < frame:
                pos = nominal
            else:
                seg = xp[lo:hi + frame]
                corr = np.correlate(seg, target, mode="valid")
                energy = np.sqrt(np.convolve(seg ** 2, np.ones(frame), mode="valid")) + 1e-12
                pos = lo + int(np.argmax(corr / energy))
        chunk = xp[pos:pos + frame]
        if chunk.size < frame:
            chunk = np.pad(chunk, (0, frame - chunk.size))
        s = k * hop_out
        out[s:s + frame] += chunk * win
        norm[s:s + frame] += win
        prev_pos = pos
    out = out / np.maximum(norm, 1e-8)
    # frame 0 was taken at padded position `frame`, i.e. input sample 0
    return out[:out_len]


# -- prosody --------------------------------------------------------------------

F0_MIN = 50.0
F0_MAX = 600.0
F0_WINDOW = 400  # 25 ms
YIN_THRESHOLD = 0.15
SILENCE_RMS = 1e-4


def frame_energy(x: np.ndarray, frame: int = WIN_LENGTH, hop: int = HOP) -> np.ndarray:
    """Per-frame RMS on the mel frame grid (centered, zero padded)."""
    pad = frame // 2
    xp = np.pad(x, pad)
    n = n_mel_frames(x.size, hop)
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return np.sqrt(np.mean(xp[idx] ** 2, axis=1))


def estimate_f0(x: np.ndarray, sr: int = SAMPLE_RATE, hop: int = HOP) -> np.ndarray:
    """Frame-wise F0 by the YIN autocorrelation-difference method; 0 = unvoiced."""
    tau_min = int(np.floor(sr / F0_MAX))
    tau_max = int(np.ceil(sr / F0_MIN))
    w = F0_WINDOW
    n = n_mel_frames(x.size, hop)
    span = w + tau_max
    xp = np.pad(x, (w // 2, span))
    idx = np.arange(span)[None, :] + hop * np.arange(n)[:, None]
    frames = xp[idx]  # [n, w + tau_max], frame i starts w/2 before its centre
    # difference function d(tau) = sum_j (x_j - x_{j+tau})^2, j in [0, w)
    nfft = 1 << int(np.ceil(np.log2(span + w)))
    head = frames[:, :w]
    spec_full = np.fft.rfft(frames, nfft, axis=1)
    spec_head = np.fft.rfft(head, nfft, axis=1)
    xcorr = np.fft.irfft(spec_full * np.conj(spec_head), nfft, axis=1)[:, :tau_max + 1]
    sq = np.cumsum(np.pad(frames ** 2, ((0, 0), (1, 0))), axis=1)
    e0 = sq[:, w][:, None]
    taus = np.arange(tau_max + 1)
    e_tau = sq[:, taus + w] - sq[:, taus]
    diff = np.maximum(e0 + e_tau - 2.0 * xcorr, 0.0)
    # cumulative mean normalised difference
    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    cmnd[:, 1:] = diff[:, 1:] * taus[1:][None, :] / np.maximum(cum, 1e-12)

    rms = np.sqrt(e0[:, 0] / w)
    f0 = np.zeros(n)
    search = cmnd[:, tau_min:tau_max + 1]
    for i in range(n):
        if rms[i] < SILENCE_RMS:
            continue
        row = search[i]
        below = np.nonzero(row < YIN_THRESHOLD)[0]
        if below.size == 0:
            continue
        j = below[0]
        while j + 1 < row.size and row[j + 1] < row[j]:
            j += 1
        tau = float(j + tau_min)
        if 0 < j < row.size - 1:
            a, b, c = row[j - 1], row[j], row[j + 1]
            denom = a - 2 * b + c
            if abs(denom) > 1e-12:
                tau += 0.5 * (a - c) / denom
        f0[i] = sr / tau
    return f0


def extract_prosody(waveform) -> ProsodyTrack:
    x = _check_waveform(waveform)
    f0 = estimate_f0(x)
    energy = frame_energy(x)
    return ProsodyTrack(f0_hz=f0, energy=energy, voiced_mask=f0 > 0)


# -- Griffin-Lim ------------------------------------------------------------------

def mel_to_magnitude(log_mel: np.ndarray, n_iter: int = 60) -> np.ndarray:
    """Non-negative least-squares inverse of the mel filterbank via multiplicative updates."""
    fb = mel_filterbank()
    target = np.exp(np.asarray(log_mel, dtype=np.float64))
    target = np.where(log_mel <= np.log(LOG_FLOOR) + 1e-6, 0.0, target)
    mag = np.maximum(target @ np.linalg.pinv(fb).T, 0.0) + 1e-8
    fbt_y = target @ fb
    gram = fb.T @ fb
    for _ in range(n_iter):
        mag *= fbt_y / (mag @ gram + 1e-12)
    return mag


def griffin_lim(mel, iterations: int = 64, momentum: float = 0.99, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram to audio with fast Griffin-Lim.

    Output length is (T_m - 1) * hop samples.
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    mag = mel_to_magnitude(frames)
    length = max((frames.shape[0] - 1) * HOP, 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    prev = np.zeros_like(angles)
    x = istft(mag * angles, length)
    for _ in range(iterations):
        rebuilt = stft(x)
        rebuilt = rebuilt[: mag.shape[0]]
        accel = rebuilt - (momentum / (1 + momentum)) * prev
        prev = rebuilt
        angles = accel / np.maximum(np.abs(accel), 1e-16)
        x = istft(mag * angles, length)
    return x
