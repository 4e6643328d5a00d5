"""DSP front end: trimming, log-mel features, F0 tracking and prosody targets."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

SAMPLE_RATE = 16000
HOP = 200  # 12.5 ms
WIN = 800  # 50 ms
N_FFT = 1024
N_MELS = 80
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10


class SignalError(ValueError):
    pass


@dataclass
class F0Contour:
    values: np.ndarray
    voiced: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class AlignmentSegment:
    phoneme: int
    start: int
    end: int


def read_wav(path, rate: int = SAMPLE_RATE) -> np.ndarray:
    """16-bit PCM WAV -> float samples in [-1, 1] at `rate` (stereo averaged)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise SignalError(f"{path}: only 16-bit PCM is supported")
        sr, channels = wf.getframerate(), wf.getnchannels()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2").astype(np.float64)
    data = data.reshape(-1, channels).mean(axis=1) / 32768.0
    if sr != rate:
        from math import gcd

        from scipy.signal import resample_poly

        g = gcd(sr, rate)
        data = resample_poly(data, rate // g, sr // g)
    return np.clip(data, -1.0, 1.0)


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())


def trim_silence(wave_: np.ndarray, top_db: float = 40.0, frame: int = 400) -> np.ndarray:
    """Drop leading/trailing 25 ms frames quieter than `top_db` below the loudest frame."""
    x = np.asarray(wave_, dtype=np.float64)
    if x.size == 0:
        raise SignalError("empty waveform")
    n_frames = -(-len(x) // frame)
    padded = np.zeros(n_frames * frame)
    padded[: len(x)] = x
    rms = np.sqrt(np.mean(padded.reshape(n_frames, frame) ** 2, axis=1))
    peak = rms.max()
    if peak == 0:
        raise SignalError("waveform is entirely silent")
    loud = np.flatnonzero(rms >= peak * 10 ** (-top_db / 20))
    return x[loud[0] * frame : min((loud[-1] + 1) * frame, len(x))]


def num_frames(n_samples: int) -> int:
    return 1 + n_samples // HOP


def _frames(x: np.ndarray, length: int) -> np.ndarray:
    """Centred frames of `length` samples at every hop, reflect-padded."""
    pad = length // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > pad else np.pad(x, pad)
    n = num_frames(len(x))
    idx = np.arange(length)[None, :] + HOP * np.arange(n)[:, None]
    return xp[idx]


def stft(x: np.ndarray) -> np.ndarray:
    """Complex spectrum [frames x N_FFT//2+1] with a Hann window of WIN samples."""
    window = np.hanning(WIN + 1)[:-1]
    return np.fft.rfft(_frames(np.asarray(x, dtype=np.float64), WIN) * window, n=N_FFT, axis=1)


def istft(spec: np.ndarray, length: Optional[int] = None) -> np.ndarray:
    """Weighted overlap-add inverse of `stft`."""
    window = np.hanning(WIN + 1)[:-1]
    frames = np.fft.irfft(spec, n=N_FFT, axis=1)[:, :WIN] * window
    n = len(spec)
    total = WIN + HOP * (n - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for k in range(n):
        out[k * HOP : k * HOP + WIN] += frames[k]
        norm[k * HOP : k * HOP + WIN] += window**2
    out = out / np.maximum(norm, 1e-8)
    out = out[WIN // 2 :]
    if length is None:
        length = (n - 1) * HOP
    out = out[:length]
    return np.pad(out, (0, max(0, length - len(out))))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters [n_mels x N_FFT//2+1] with unit peak, equally spaced on the mel scale."""
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for k in range(n_mels):
        lo, mid, hi = edges[k : k + 3]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_spectrogram(wave_: np.ndarray) -> np.ndarray:
    """Natural-log 80-band mel magnitude spectrogram, [frames x 80]."""
    x = np.asarray(wave_, dtype=np.float64)
    if len(x) < WIN:
        raise SignalError(f"waveform shorter than one analysis window ({WIN} samples)")
    mag = np.abs(stft(x))
    return np.log(np.maximum(mag @ mel_filterbank().T, LOG_FLOOR))


def estimate_f0(
    wave_: np.ndarray,
    fmin: float = 60.0,
    fmax: float = 400.0,
    threshold: float = 0.3,
    silence_rms: float = 1e-4,
    window: int = 400,
) -> F0Contour:
    """Normalized-autocorrelation pitch tracker on the mel frame grid.

    For each hop the lag with the strongest normalized autocorrelation in the
    fmin..fmax band is refined by parabolic interpolation. The smallest lag whose
    peak reaches 90% of the best one is taken to avoid sub-octave picks.
    """
    x = np.asarray(wave_, dtype=np.float64)
    min_lag = int(np.floor(SAMPLE_RATE / fmax))
    max_lag = int(np.ceil(SAMPLE_RATE / fmin))
    n = num_frames(len(x))
    half = window // 2
    xp = np.concatenate([np.zeros(half), x, np.zeros(half + max_lag + 2)])
    values = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    lags = np.arange(min_lag - 1, max_lag + 2)
    for k in range(n):
        seg = xp[k * HOP : k * HOP + window + max_lag + 2]
        head = seg[:window]
        e0 = head @ head
        if np.sqrt(e0 / window) < silence_rms:
            continue
        # shifted[l] = seg[l : l + window] for each candidate lag
        shifted = np.lib.stride_tricks.sliding_window_view(seg, window)[lags]
        energy = np.einsum("ij,ij->i", shifted, shifted)
        r = (shifted @ head) / np.sqrt(np.maximum(e0 * energy, 1e-20))
        inner = r[1:-1]
        is_peak = (inner >= r[:-2]) & (inner > r[2:])
        peaks = np.flatnonzero(is_peak)
        if peaks.size == 0:
            continue
        best = inner[peaks].max()
        if best < threshold:
            continue
        p = peaks[np.argmax(inner[peaks] >= 0.9 * best)]
        a, b, c = r[p], r[p + 1], r[p + 2]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        lag = lags[p + 1] + shift
        values[k] = SAMPLE_RATE / lag
        voiced[k] = True
    return F0Contour(values, voiced)


def interpolate_unvoiced(f0: F0Contour) -> np.ndarray:
    """Linear interpolation across unvoiced frames; edges hold the nearest voiced value."""
    voiced = np.asarray(f0.voiced, dtype=bool)
    if not voiced.any():
        raise SignalError("contour has no voiced frame")
    idx = np.arange(len(voiced))
    values = np.asarray(f0.values, dtype=np.float64)
    out = np.interp(idx, idx[voiced], values[voiced])
    out[voiced] = values[voiced]
    return out


def check_segments(segments: Sequence[AlignmentSegment], n_frames: Optional[int] = None) -> None:
    if not segments:
        raise SignalError("no alignment segments")
    pos = 0
    for seg in segments:
        if seg.start != pos:
            raise SignalError(f"gap or overlap at frame {pos} (segment starts at {seg.start})")
        if seg.end <= seg.start:
            raise SignalError(f"empty segment at frame {seg.start}")
        pos = seg.end
    if n_frames is not None and pos != n_frames:
        raise SignalError(f"segments cover {pos} frames, expected {n_frames}")


def phoneme_average_f0(f0_interp: np.ndarray, segments: Sequence[AlignmentSegment]) -> np.ndarray:
    f0_interp = np.asarray(f0_interp, dtype=np.float64)
    check_segments(segments, len(f0_interp))
    return np.array([f0_interp[s.start : s.end].mean() for s in segments])


def f0_stats_and_normalize(values, stats: Optional[Tuple[float, float]] = None):
    """Z-normalize phoneme-level F0. Without `stats`, fit them on `values`.

    `values` may be one array or a collection of per-utterance arrays; the
    normalized result mirrors that structure.
    """
    nested = isinstance(values, (list, tuple)) and len(values) > 0 and np.ndim(values[0]) > 0
    flat = np.concatenate([np.ravel(v) for v in values]) if nested else np.asarray(values, dtype=np.float64)
    if stats is None:
        mean, std = float(np.mean(flat)), float(np.std(flat))
    else:
        mean, std = map(float, stats)
    if std == 0:
        raise SignalError("F0 standard deviation is zero")
    if nested:
        return [(np.asarray(v, dtype=np.float64) - mean) / std for v in values], (mean, std)
    return (flat - mean) / std, (mean, std)


def durations_from_alignment(segments: Sequence[AlignmentSegment]) -> np.ndarray:
    """Natural log of the frame count of each segment."""
    lengths = []
    for s in segments:
        if s.end <= s.start:
            raise SignalError(f"empty segment at frame {s.start}")
        lengths.append(s.end - s.start)
    return np.log(np.asarray(lengths, dtype=np.float64))


def read_alignment(path, inventory) -> List[AlignmentSegment]:
    segs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                sym, start, end = line.rstrip("\n").split("\t")
                segs.append(AlignmentSegment(inventory.index(sym), int(start), int(end)))
    check_segments(segs)
    return segs


def write_alignment(path, segments: Sequence[AlignmentSegment], inventory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in segments:
            fh.write(f"{inventory.itos[s.phoneme]}\t{s.start}\t{s.end}\n")


def invert_mel(mel: np.ndarray, iterations: int = 32, seed: int = 0) -> np.ndarray:
    """Low-fidelity waveform from a log-mel spectrogram (debug audio only).

    The mel magnitudes are mapped back to linear frequency with a non-negative
    pseudo-inverse of the filterbank, then Griffin-Lim recovers a phase.
    """
    mel = np.asarray(mel, dtype=np.float64)
    fb = mel_filterbank()
    mag = np.maximum(np.exp(mel) @ np.linalg.pinv(fb).T, 0.0)
    n = len(mel)
    length = (n - 1) * HOP
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, length)
    for _ in range(iterations):
        spec = stft(x) if len(x) >= WIN // 2 + 1 else mag * phase
        spec = spec[:n]
        phase = np.exp(1j * np.angle(spec))
        x = istft(mag * phase, length)
    return np.clip(x, -1.0, 1.0)
