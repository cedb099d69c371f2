"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .audio_io import CANONICAL_RATE, Waveform


def check_waveform(w, min_samples: int = 1, sample_rate: int | None = None) -> Waveform:
    """Coerce ``w`` to a :class:`Waveform` and check its length and rate."""
    if not isinstance(w, Waveform):
        arr = np.asarray(w, dtype=np.float64)
        w = Waveform(arr, sample_rate or CANONICAL_RATE)
    if len(w) < min_samples:
        raise ValueError(f"waveform has {len(w)} samples, need at least {min_samples}")
    if sample_rate is not None and w.sample_rate != sample_rate:
        raise ValueError(f"expected {sample_rate} Hz audio, got {w.sample_rate} Hz")
    return w


def check_waveforms(X, min_samples: int = 1, sample_rate: int | None = None) -> list[Waveform]:
    if isinstance(X, (Waveform, np.ndarray)) and not (isinstance(X, np.ndarray) and X.dtype == object):
        X = [X]
    out = [check_waveform(w, min_samples, sample_rate) for w in X]
    if not out:
        raise ValueError("no waveforms given")
    return out


def check_pair(x: Waveform, x_prime: Waveform):
    if len(x) != len(x_prime):
        raise ValueError(f"length mismatch: {len(x)} vs {len(x_prime)}")
    if x.sample_rate != x_prime.sample_rate:
        raise ValueError("sample-rate mismatch")
