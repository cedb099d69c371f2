"""Perturbation-removal and data-augmentation transforms for the robustness battery."""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .. import dsp
from ..audio_io import Waveform, load_wav, resample, save_wav

# tag -> short label used in reports
KINDS = {
    "resample-roundtrip": "RS",
    "mel-invert": "Mel",
    "quantize-dequantize": "Q-D",
    "filtering": "Filtering",
    "speed": "Speed",
    "gaussian-noise": "Gaussian",
    "time-mask": "TiM",
    "pitch-shift": "PS",
    "tanh-distortion": "Tanh",
    "band-pass": "BPF",
    "low-pass": "LPF",
    "high-pass": "HPF",
    "spectral-gating-denoise": "SG",
}
OPTIONAL_KINDS = {"mp3": "MP3"}

DEFAULTS = {
    "resample-roundtrip": {"rate": 8000},
    "mel-invert": {"n_mels": 40, "n_fft": 512, "hop": 128, "iterations": 32},
    "quantize-dequantize": {"bits": 8},
    "filtering": {"kernel": 5},
    "speed": {"factor": 1.1},
    "gaussian-noise": {"sigma": 0.01, "seed": 0},
    "time-mask": {"fraction": 0.1, "seed": 0},
    "pitch-shift": {"semitones": 2.0, "n_fft": 512, "hop": 128},
    "tanh-distortion": {"drive": 2.0},
    "band-pass": {"low": 300.0, "high": 4000.0, "order": 5},
    "low-pass": {"cutoff": 4000.0, "order": 5},
    "high-pass": {"cutoff": 300.0, "order": 5},
    "spectral-gating-denoise": {"threshold_db": 6.0, "n_fft": 512, "hop": 128, "percentile": 10.0},
    "mp3": {"encoder": None, "bitrate": "64k"},
}


class AugmentationSkipped(RuntimeError):
    """Raised when an optional transform lacks its external tool."""


def _out(samples, sr) -> Waveform:
    samples = np.nan_to_num(np.asarray(samples, dtype=np.float64))
    if samples.size == 0:
        samples = np.zeros(1)
    return Waveform(np.clip(samples, -1.0, 1.0), sr)


def _stft(x, sr, n_fft, hop):
    _, _, Z = signal.stft(x, sr, window="hann", nperseg=n_fft, noverlap=n_fft - hop,
                          boundary="zeros", padded=True)
    return Z


def _istft(Z, sr, n_fft, hop, length):
    _, y = signal.istft(Z, sr, window="hann", nperseg=n_fft, noverlap=n_fft - hop, boundary=True)
    y = y[:length]
    return np.pad(y, (0, max(0, length - y.shape[0])))


def griffin_lim(mag, sr, n_fft, hop, length, iterations):
    """Phase recovery from a magnitude spectrogram, starting from zero phase."""
    Z = mag.astype(np.complex128)
    for _ in range(iterations):
        y = _istft(Z, sr, n_fft, hop, length)
        rebuilt = _stft(y, sr, n_fft, hop)
        Z = mag * np.exp(1j * np.angle(rebuilt))
    return _istft(Z, sr, n_fft, hop, length)


def mel_invert(x, sr, n_mels, n_fft, hop, iterations):
    Z = _stft(x, sr, n_fft, hop)
    cfg = dsp.StftConfig(frame_length=n_fft, hop_length=hop, fft_size=n_fft)
    fb = dsp.mel_filterbank(n_mels, cfg, sr).numpy()  # [bins, mels]
    mel = fb.T @ (np.abs(Z) ** 2)
    power = np.maximum(np.linalg.pinv(fb.T) @ mel, 0.0)
    return griffin_lim(np.sqrt(power), sr, n_fft, hop, len(x), iterations)


def phase_vocoder(Z, rate, hop):
    """Time-stretch a spectrogram by ``rate`` (>1 speeds up)."""
    n_bins, n_frames = Z.shape
    steps = np.arange(0, n_frames - 1, rate)
    expected = np.linspace(0, np.pi * hop, n_bins)
    phase = np.angle(Z[:, 0])
    out = np.zeros((n_bins, len(steps)), dtype=np.complex128)
    padded = np.concatenate([Z, np.zeros((n_bins, 2))], axis=1)
    for i, step in enumerate(steps):
        k = int(step)
        frac = step - k
        a, b = padded[:, k], padded[:, k + 1]
        mag = (1 - frac) * np.abs(a) + frac * np.abs(b)
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - expected
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + expected + dphi
    return out


def pitch_shift(x, sr, semitones, n_fft, hop):
    ratio = 2.0 ** (semitones / 12.0)
    Z = _stft(x, sr, n_fft, hop)
    stretched = phase_vocoder(Z, 1.0 / ratio, hop)
    y = _istft(stretched, sr, n_fft, hop, int(round(len(x) * ratio)))
    return signal.resample(y, len(x))


def spectral_gate(x, sr, threshold_db, n_fft, hop, percentile):
    """Stationary spectral gating: bins within ``threshold_db`` of the noise floor are muted."""
    Z = _stft(x, sr, n_fft, hop)
    db = 20.0 * np.log10(np.abs(Z) + 1e-10)
    floor = np.percentile(db, percentile, axis=1, keepdims=True)
    mask = (db > floor + threshold_db).astype(np.float64)
    mask = ndimage.uniform_filter(mask, size=(3, 5), mode="nearest")
    return _istft(Z * mask, sr, n_fft, hop, len(x))


def _butter(x, sr, btype, freqs, order):
    nyq = sr / 2.0
    freqs = np.atleast_1d(freqs) / nyq
    if np.any(freqs >= 1.0) or np.any(freqs <= 0.0):
        raise ValueError(f"filter edges {freqs * nyq} Hz outside (0, {nyq}) Hz")
    sos = signal.butter(order, freqs if freqs.size > 1 else freqs[0], btype=btype, output="sos")
    return signal.sosfiltfilt(sos, x)


def _mp3(w: Waveform, encoder, bitrate):
    if not encoder or shutil.which(encoder) is None:
        raise AugmentationSkipped("no mp3 encoder configured")
    with tempfile.TemporaryDirectory() as tmp:
        src, mp3, back = Path(tmp, "in.wav"), Path(tmp, "x.mp3"), Path(tmp, "out.wav")
        save_wav(w, src)
        subprocess.run([encoder, "-y", "-loglevel", "error", "-i", str(src), "-b:a", bitrate, str(mp3)],
                       check=True)
        subprocess.run([encoder, "-y", "-loglevel", "error", "-i", str(mp3), "-ar", str(w.sample_rate),
                        "-ac", "1", str(back)], check=True)
        out = load_wav(back).samples[: len(w)]
    return np.pad(out, (0, len(w) - out.shape[0]))


def augment(w: Waveform, kind: str, params: dict | None = None) -> Waveform:
    """Apply one battery transform; unknown params are rejected."""
    if kind == "none":
        return w
    if kind not in DEFAULTS:
        raise ValueError(f"unknown augmentation {kind!r}")
    p = dict(DEFAULTS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ValueError(f"{kind}: unknown parameters {sorted(unknown)}")
    p.update(params or {})
    x, sr = w.samples, w.sample_rate

    if kind == "resample-roundtrip":
        down = resample(w, int(p["rate"]))
        y = resample(down, sr).samples[: len(x)]
        y = np.pad(y, (0, len(x) - y.shape[0]))
    elif kind == "mel-invert":
        y = mel_invert(x, sr, p["n_mels"], p["n_fft"], p["hop"], p["iterations"])
    elif kind == "quantize-dequantize":
        if not 1 <= p["bits"] <= 32:
            raise ValueError("bits must be in [1, 32]")
        levels = 2.0 ** (p["bits"] - 1)
        y = np.round(x * levels) / levels
    elif kind == "filtering":
        if p["kernel"] < 1 or p["kernel"] % 2 == 0:
            raise ValueError("median kernel must be a positive odd integer")
        y = signal.medfilt(x, int(p["kernel"]))
    elif kind == "speed":
        if p["factor"] <= 0:
            raise ValueError("speed factor must be positive")
        y = signal.resample(x, max(1, int(round(len(x) / p["factor"]))))
    elif kind == "gaussian-noise":
        if p["sigma"] < 0:
            raise ValueError("sigma must be non-negative")
        if p["sigma"] == 0:
            return w
        y = x + p["sigma"] * np.random.default_rng(p["seed"]).standard_normal(len(x))
    elif kind == "time-mask":
        if not 0.0 <= p["fraction"] < 1.0:
            raise ValueError("fraction must be in [0, 1)")
        n = int(round(p["fraction"] * len(x)))
        start = int(np.random.default_rng(p["seed"]).integers(0, len(x) - n + 1))
        y = x.copy()
        y[start:start + n] = 0.0
    elif kind == "pitch-shift":
        y = pitch_shift(x, sr, p["semitones"], p["n_fft"], p["hop"])
    elif kind == "tanh-distortion":
        if p["drive"] <= 0:
            raise ValueError("drive must be positive")
        y = np.tanh(p["drive"] * x) / np.tanh(p["drive"])
    elif kind == "band-pass":
        y = _butter(x, sr, "bandpass", [p["low"], p["high"]], p["order"])
    elif kind == "low-pass":
        y = _butter(x, sr, "lowpass", p["cutoff"], p["order"])
    elif kind == "high-pass":
        y = _butter(x, sr, "highpass", p["cutoff"], p["order"])
    elif kind == "spectral-gating-denoise":
        y = spectral_gate(x, sr, p["threshold_db"], p["n_fft"], p["hop"], p["percentile"])
    else:  # mp3
        y = _mp3(w, p["encoder"], p["bitrate"])
    return _out(y, sr)
