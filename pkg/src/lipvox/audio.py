"""Waveform and log-mel spectrogram utilities.

All spectral parameters are fixed module constants so that training and
evaluation always see identically normalized features:

    16 kHz audio, 25 ms Hann window (400 samples) zero-padded to a 512-point
    FFT, 10 ms hop (160 samples), 80 HTK mel bands spanning 55-7600 Hz.

Log-mel values are natural-log mel power, floored at ``LOG_FLOOR`` and mapped
affinely from ``[LOG_FLOOR, LOG_CEIL]`` onto ``[0, 1]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
HOP_LENGTH = 160
WIN_LENGTH = 400
N_FFT = 512
N_MELS = 80
FMIN = 55.0
FMAX = 7600.0
LOG_FLOOR = -11.5
LOG_CEIL = 2.3
STEPS_PER_SECOND = SAMPLE_RATE // HOP_LENGTH

__all__ = [
    "Waveform",
    "MelSpectrogram",
    "AudioError",
    "load_wav",
    "save_wav",
    "melspectrogram",
    "griffin_lim",
    "mel_segment",
    "mel_filterbank",
    "hz_to_mel",
    "mel_to_hz",
]


class AudioError(ValueError):
    """Raised for malformed audio input."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise AudioError("waveform samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def slice(self, start: int, length: int) -> "Waveform":
        if start < 0 or start + length > len(self):
            raise AudioError(f"slice [{start}, {start + length}) outside waveform of {len(self)} samples")
        return Waveform(self.samples[start:start + length])


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise AudioError(f"mel spectrogram must be (steps, {N_MELS}), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise AudioError("mel spectrogram contains non-finite entries")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise AudioError("mel spectrogram entries must lie in [0, 1]")
        object.__setattr__(self, "frames", frames)

    hop_seconds = HOP_LENGTH / SAMPLE_RATE
    win_seconds = WIN_LENGTH / SAMPLE_RATE

    @property
    def num_steps(self) -> int:
        return self.frames.shape[0]


def load_wav(path) -> Waveform:
    """Read a PCM WAV file as a mono 16 kHz waveform.

    Stereo input is averaged down to mono and other sample rates are
    resampled with a polyphase filter. Integer PCM is scaled to [-1, 1]; if
    the result still peaks above 1 it is divided by its peak.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != SAMPLE_RATE:
        g = gcd(int(rate), SAMPLE_RATE)
        x = resample_poly(x, SAMPLE_RATE // g, int(rate) // g)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32))


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit mono PCM."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, w.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """Triangular HTK-style filterbank of shape ``(N_MELS, N_FFT // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    freqs = np.linspace(0.0, SAMPLE_RATE / 2.0, N_FFT // 2 + 1)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


_FILTERBANK = mel_filterbank()
# low bands are narrower than an FFT bin, leaving one near-zero singular value
_FILTERBANK_PINV = np.linalg.pinv(_FILTERBANK, rcond=1e-2)
_WINDOW = np.zeros(N_FFT)
_WINDOW[(N_FFT - WIN_LENGTH) // 2:(N_FFT + WIN_LENGTH) // 2] = np.hanning(WIN_LENGTH + 2)[1:-1]
# energy normalization: white noise of variance s2 gives per-bin power near s2,
# which keeps quiet harmonics of typical speech-level audio above the log floor
_WINDOW_GAIN = np.sqrt(np.sum(_WINDOW ** 2))


def _num_steps(num_samples: int) -> int:
    return num_samples // HOP_LENGTH


def _stft(x: np.ndarray, num_steps: int) -> np.ndarray:
    pad = N_FFT // 2
    padded = np.pad(x, (pad, pad), mode="reflect")
    idx = np.arange(num_steps)[:, None] * HOP_LENGTH + np.arange(N_FFT)[None, :]
    return np.fft.rfft(padded[idx] * _WINDOW, axis=1) / _WINDOW_GAIN


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    num_steps = spec.shape[0]
    pad = N_FFT // 2
    frames = np.fft.irfft(spec * _WINDOW_GAIN, n=N_FFT, axis=1) * _WINDOW
    total = (num_steps - 1) * HOP_LENGTH + N_FFT
    out = np.zeros(max(total, length + 2 * pad))
    norm = np.zeros_like(out)
    idx = np.arange(num_steps)[:, None] * HOP_LENGTH + np.arange(N_FFT)[None, :]
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(_WINDOW ** 2, frames.shape))
    out = out / np.maximum(norm, 1e-8)
    return out[pad:pad + length]


def _normalize(log_mel: np.ndarray) -> np.ndarray:
    return np.clip((log_mel - LOG_FLOOR) / (LOG_CEIL - LOG_FLOOR), 0.0, 1.0)


def _denormalize(norm: np.ndarray) -> np.ndarray:
    return norm * (LOG_CEIL - LOG_FLOOR) + LOG_FLOOR


def melspectrogram(w: Waveform) -> MelSpectrogram:
    """Normalized log-mel spectrogram with ``len(w) // 160`` steps."""
    if len(w) < WIN_LENGTH:
        raise AudioError(f"waveform of {len(w)} samples is shorter than one {WIN_LENGTH}-sample window")
    x = w.samples.astype(np.float64)
    power = np.abs(_stft(x, _num_steps(len(x)))) ** 2
    mel_power = power @ _FILTERBANK.T
    log_mel = np.log(np.maximum(mel_power, np.exp(LOG_FLOOR)))
    return MelSpectrogram(_normalize(log_mel))


def griffin_lim(m: MelSpectrogram, iterations: int = 60) -> Waveform:
    """Invert a normalized log-mel spectrogram to audio.

    The mel power is mapped back to linear frequency with the filterbank
    pseudo-inverse and phases are recovered by Griffin-Lim starting from zero
    phase, so the result is a deterministic function of the input.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    frames = np.asarray(m.frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise AudioError("mel spectrogram contains non-finite entries")
    length = m.num_steps * HOP_LENGTH
    mel_power = np.exp(_denormalize(frames))
    linear_power = np.maximum(mel_power @ _FILTERBANK_PINV.T, 0.0)
    magnitude = np.sqrt(linear_power)

    spec = magnitude.astype(np.complex128)
    x = _istft(spec, length)
    for _ in range(iterations - 1):
        rebuilt = _stft(x, m.num_steps)
        spec = magnitude * np.exp(1j * np.angle(rebuilt))
        x = _istft(spec, length)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32))


def mel_segment(m: MelSpectrogram, start: int, length: int) -> MelSpectrogram:
    if start < 0 or length < 0 or start + length > m.num_steps:
        raise IndexError(f"segment [{start}, {start + length}) outside {m.num_steps}-step spectrogram")
    return MelSpectrogram(m.frames[start:start + length])
