"""Waveform container, WAV ingestion/persistence and band-limited resampling."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

CANONICAL_RATE = 16000

# windowed-sinc design: Kaiser(beta=8), 32 zero crossings per side
_KAISER_BETA = 8.0
_ZERO_CROSSINGS = 32


class AudioError(ValueError):
    """Raised for unreadable, malformed or out-of-contract audio."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio in [-1, 1] at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioError(f"waveform must be mono (1-D), got shape {s.shape}")
        if s.size < 1:
            raise AudioError("waveform must contain at least one sample")
        if not np.all(np.isfinite(s)):
            raise AudioError("waveform contains non-finite samples")
        if np.max(np.abs(s)) > 1.0:
            raise AudioError("waveform samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise AudioError("sample_rate must be positive")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @classmethod
    def from_unclamped(cls, samples, sample_rate: int = CANONICAL_RATE) -> "Waveform":
        return cls(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0), sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 8 / 255
    norm_order: str = field(default="inf")

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.norm_order != "inf":
            raise ValueError("only the l-infinity budget is supported")

    def contains(self, x: Waveform, x_prime: Waveform, atol: float = 1e-9) -> bool:
        return float(np.max(np.abs(x_prime.samples - x.samples))) <= self.epsilon + atol


def _decode_pcm(raw: bytes, width: int, channels: int) -> np.ndarray:
    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints.astype(np.float64) / float(1 << 23)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise AudioError(f"unsupported sample width: {width} bytes")
    return data.reshape(-1, channels)


def load_wav(path) -> Waveform:
    """Read an 8/16/24/32-bit PCM WAV file; stereo is averaged to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: not a PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise AudioError(f"{path}: unreadable ({exc})") from exc
    if channels not in (1, 2):
        raise AudioError(f"{path}: only mono or stereo supported, got {channels} channels")
    frames = _decode_pcm(raw, width, channels)
    if frames.shape[0] == 0:
        raise AudioError(f"{path}: zero-length audio")
    return Waveform(np.clip(frames.mean(axis=1), -1.0, 1.0), rate)


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit PCM mono."""
    codes = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(w.sample_rate)
            fh.writeframes(codes.tobytes())
    except OSError as exc:
        raise AudioError(f"{path}: not writable ({exc})") from exc


def _sinc_filter(up: int, down: int) -> np.ndarray:
    # cutoff at the lower of the two Nyquist limits, expressed at the upsampled rate
    factor = max(up, down)
    half = _ZERO_CROSSINGS * factor
    n = np.arange(-half, half + 1, dtype=np.float64)
    h = np.sinc(n / factor) / factor
    h *= np.kaiser(2 * half + 1, _KAISER_BETA)
    # unit DC gain; resample_poly applies the factor ``up`` itself
    return h / h.sum()


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling; output length scales with the rate ratio."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return w
    g = gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = signal.resample_poly(w.samples, up, down, window=_sinc_filter(up, down))
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    out = out[:n_out]
    if out.shape[0] < n_out:
        out = np.pad(out, (0, n_out - out.shape[0]))
    if out.shape[0] == 0:
        out = np.zeros(1)
    return Waveform(np.clip(out, -1.0, 1.0), target_rate)


def to_canonical(w: Waveform) -> Waveform:
    return resample(w, CANONICAL_RATE)
