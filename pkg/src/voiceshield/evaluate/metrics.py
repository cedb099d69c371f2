"""WER, SIM and SNR."""

from __future__ import annotations

import re

import numpy as np

from ..audio_io import Waveform

SNR_CAP_DB = 120.0

_PUNCT = re.compile(r"[^\w\s']")


def normalize_text(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def edit_distance(ref, hyp) -> int:
    """Unit-cost Levenshtein distance between two token sequences."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate in percent; can exceed 100 when the hypothesis has insertions."""
    ref = normalize_text(reference)
    if not ref:
        raise ValueError("reference transcript is empty")
    return 100.0 * edit_distance(ref, normalize_text(hypothesis)) / len(ref)


def sim(a: Waveform, b: Waveform, verifier) -> float:
    ea, eb = verifier.encode(a), verifier.encode(b)
    return float(np.clip(np.dot(ea.values, eb.values), -1.0, 1.0))


def snr(x: Waveform, x_prime: Waveform) -> float:
    if len(x) != len(x_prime):
        raise ValueError("snr needs equal-length signals")
    signal = float(np.sum(x.samples**2))
    if signal == 0.0:
        raise ValueError("snr is undefined for a silent reference")
    noise = float(np.sum((x_prime.samples - x.samples) ** 2))
    if noise <= signal * 10.0 ** (-SNR_CAP_DB / 10.0):
        return SNR_CAP_DB
    return float(10.0 * np.log10(signal / noise))
