"""Differentiable spectral primitives: framing, STFT, log-PSD, mel filterbank, MFCC.

Everything here operates on float64 torch tensors so gradients can flow back to
the waveform samples. Public functions also accept :class:`Waveform` objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .audio_io import Waveform

POWER_FLOOR = 1e-20
FLOOR_DB = 10.0 * math.log10(POWER_FLOOR)  # -200 dB
PSD_REFERENCE_DB = 96.0


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 2048
    hop_length: int = 512
    fft_size: int = 2048
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.frame_length <= self.fft_size:
            raise ValueError("need 0 < hop_length <= frame_length <= fft_size")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_length) // self.hop_length

    def bin_frequencies(self, sample_rate: int) -> np.ndarray:
        return np.arange(self.n_bins) * sample_rate / self.fft_size

    def key(self) -> str:
        return f"{self.window}-{self.frame_length}-{self.hop_length}-{self.fft_size}"


# short-window analysis used by the surrogate models and the MFCC extractor
SPEECH_STFT = StftConfig(frame_length=400, hop_length=160, fft_size=512)


@dataclass(frozen=True)
class PsdFrameMatrix:
    values: np.ndarray  # [frames, bins] dB, shifted so the global max is 96
    freq_axis: np.ndarray
    frame_times: np.ndarray
    shift_db: float


@dataclass(frozen=True)
class MfccMatrix:
    values: np.ndarray  # [frames, n_mfcc]

    @property
    def n_mfcc(self) -> int:
        return self.values.shape[1]


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return torch.as_tensor(np.array(x.samples), dtype=torch.float64)
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return torch.as_tensor(arr if arr.flags.writeable else arr.copy())


def hann(n: int) -> torch.Tensor:
    # periodic Hann, as used for spectral analysis
    return torch.hann_window(n, periodic=True, dtype=torch.float64)


def frames(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    if x.shape[-1] < cfg.frame_length:
        raise ValueError(
            f"input of {x.shape[-1]} samples is shorter than one frame ({cfg.frame_length})"
        )
    return x.unfold(-1, cfg.frame_length, cfg.hop_length)


def stft(w, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Complex spectrogram ``[frames, fft_size // 2 + 1]``; Hann window, no padding."""
    x = as_tensor(w)
    fr = frames(x, cfg) * hann(cfg.frame_length)
    return torch.fft.rfft(fr, n=cfg.fft_size, dim=-1)


def raw_log_psd(w, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """10*log10(|X|^2 / N^2) with the power floored at 1e-20, before any shift."""
    spec = stft(w, cfg)
    power = (spec.real**2 + spec.imag**2) / float(cfg.fft_size) ** 2
    return 10.0 * torch.log10(torch.clamp(power, min=POWER_FLOOR))


def full_scale_shift(cfg: StftConfig) -> float:
    """Shift that maps a full-scale bin-centred sine to 96 dB."""
    peak = 0.5 * float(hann(cfg.frame_length).sum()) / cfg.fft_size
    return PSD_REFERENCE_DB - 20.0 * math.log10(peak)


def psd_shift(raw_db: torch.Tensor, cfg: StftConfig) -> float:
    peak = float(raw_db.max())
    if peak <= FLOOR_DB:
        # digital silence has no level of its own to normalise against
        return full_scale_shift(cfg)
    return PSD_REFERENCE_DB - peak


def log_psd(w, cfg: StftConfig = StftConfig(), shift_db: float | None = None) -> PsdFrameMatrix:
    """Log-magnitude PSD normalised so the global maximum sits at 96 dB.

    Pass ``shift_db`` to reuse another signal's normalisation (the perturbation
    PSD is expressed on the clean signal's scale).
    """
    sr = w.sample_rate if isinstance(w, Waveform) else 16000
    with torch.no_grad():
        raw = raw_log_psd(w, cfg)
    if shift_db is None:
        shift_db = psd_shift(raw, cfg)
    vals = raw.numpy() + shift_db
    n = vals.shape[0]
    return PsdFrameMatrix(
        values=vals,
        freq_axis=cfg.bin_frequencies(sr),
        frame_times=np.arange(n) * cfg.hop_length / sr,
        shift_db=float(shift_db),
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, cfg: StftConfig, sample_rate: int) -> torch.Tensor:
    """Triangular HTK-mel filters spanning 0 Hz..Nyquist, shape ``[bins, n_mels]``."""
    freqs = cfg.bin_frequencies(sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((freqs.shape[0], n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return torch.as_tensor(fb)


def dct_matrix(n_in: int, n_out: int) -> torch.Tensor:
    """Orthonormal DCT-II basis, shape ``[n_in, n_out]`` (first ``n_out`` coefficients)."""
    n = np.arange(n_in)[:, None]
    k = np.arange(n_out)[None, :]
    basis = np.cos(np.pi * (2 * n + 1) * k / (2.0 * n_in)) * math.sqrt(2.0 / n_in)
    basis[:, 0] = math.sqrt(1.0 / n_in)
    return torch.as_tensor(basis)


def log_mel(w, cfg: StftConfig = SPEECH_STFT, n_mels: int = 40, sample_rate: int = 16000) -> torch.Tensor:
    """Natural-log mel energies ``[frames, n_mels]``, floored at 1e-20."""
    spec = stft(w, cfg)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(n_mels, cfg, sample_rate)
    return torch.log(torch.clamp(mel, min=POWER_FLOOR))


def mfcc_tensor(w, cfg: StftConfig = SPEECH_STFT, n_mels: int = 40, n_mfcc: int = 13,
                sample_rate: int = 16000) -> torch.Tensor:
    if n_mfcc > n_mels:
        raise ValueError("n_mfcc must not exceed n_mels")
    if sample_rate < 2:
        raise ValueError("sample_rate too low")
    return log_mel(w, cfg, n_mels, sample_rate) @ dct_matrix(n_mels, n_mfcc)


def mfcc(w, cfg: StftConfig = SPEECH_STFT, n_mels: int = 40, n_mfcc: int = 13) -> MfccMatrix:
    sr = w.sample_rate if isinstance(w, Waveform) else 16000
    with torch.no_grad():
        vals = mfcc_tensor(w, cfg, n_mels, n_mfcc, sr)
    return MfccMatrix(vals.numpy())
