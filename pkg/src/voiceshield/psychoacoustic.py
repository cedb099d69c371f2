"""Frequency-masking threshold of a clean signal and the hinge penalty against it.

The threshold follows the tonal-masker part of MPEG-1 psychoacoustic model 1:
tonal peaks are found per frame, merged with their neighbours, pruned against
the threshold in quiet and against each other (0.5 Bark), spread over the Bark
axis with a two-slope function and power-summed with the threshold in quiet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .audio_io import Waveform
from .dsp import PSD_REFERENCE_DB, StftConfig, as_tensor, log_psd, psd_shift, raw_log_psd

HINGE_SHARPNESS = 10.0
TONAL_MARGIN_DB = 7.0
DEDUP_BARK = 0.5


def bark(f):
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def absolute_threshold(freqs) -> np.ndarray:
    """Threshold in quiet (dB SPL), capped at 96 dB; the DC bin gets the cap."""
    f = np.asarray(freqs, dtype=np.float64)
    ath = np.full(f.shape, PSD_REFERENCE_DB)
    pos = f > 0
    khz = f[pos] / 1000.0
    ath[pos] = 3.64 * khz**-0.8 - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2) + 1e-3 * khz**4
    return np.minimum(ath, PSD_REFERENCE_DB)


def _tonal_offsets(freqs: np.ndarray) -> list[np.ndarray]:
    wide = np.array([-6, -5, -4, -3, -2, 2, 3, 4, 5, 6])
    narrow = np.array([-3, -2, 2, 3])
    return [wide if f > 5500.0 else narrow for f in freqs]


def find_tonal_maskers(psd_frame: np.ndarray, freqs: np.ndarray, offsets=None) -> np.ndarray:
    """Bins that are local maxima and stand >= 7 dB above bins at the tonal offsets."""
    n = psd_frame.shape[0]
    if offsets is None:
        offsets = _tonal_offsets(freqs)
    out = []
    for k in range(1, n - 1):
        p = psd_frame[k]
        if not (p > psd_frame[k - 1] and p > psd_frame[k + 1]):
            continue
        idx = k + offsets[k]
        idx = idx[(idx >= 0) & (idx < n)]
        if np.all(p - psd_frame[idx] >= TONAL_MARGIN_DB):
            out.append(k)
    return np.asarray(out, dtype=int)


def _power_db_sum(*levels):
    return 10.0 * np.log10(sum(10.0 ** (lv / 10.0) for lv in levels))


def _prune(bins: np.ndarray, levels: np.ndarray, barks: np.ndarray, ath: np.ndarray):
    keep = levels >= ath[bins]
    bins, levels = bins[keep], levels[keep]
    kept_b, kept_l = [], []
    for b, lv in zip(bins, levels):
        if kept_b and barks[b] - barks[kept_b[-1]] < DEDUP_BARK:
            if lv > kept_l[-1]:
                kept_b[-1], kept_l[-1] = b, lv
            continue
        kept_b.append(b)
        kept_l.append(lv)
    return np.asarray(kept_b, dtype=int), np.asarray(kept_l, dtype=np.float64)


def spreading(dz: np.ndarray, level: float) -> np.ndarray:
    """Two-slope Bark spreading (dB) at Bark distance ``dz = z_maskee - z_masker``."""
    upper = -27.0 + 0.37 * max(level - 40.0, 0.0)
    return np.where(dz >= 0.0, upper * dz, 27.0 * dz)


def frame_threshold(psd_frame: np.ndarray, freqs: np.ndarray, barks: np.ndarray,
                    ath: np.ndarray, offsets=None):
    """Global masking threshold of one frame plus the surviving (bin, level) maskers."""
    cand = find_tonal_maskers(psd_frame, freqs, offsets)
    levels = np.array([_power_db_sum(*psd_frame[k - 1:k + 2]) for k in cand], dtype=np.float64)
    bins, levels = _prune(cand, levels, barks, ath)
    masked = np.zeros_like(psd_frame)
    for b, lv in zip(bins, levels):
        spread = lv + spreading(barks - barks[b], lv) - 6.025 - 0.275 * barks[b]
        masked += 10.0 ** (spread / 10.0)
    # written relative to ATH so that no maskers gives back ATH exactly
    theta = ath + 10.0 * np.log10(1.0 + masked / 10.0 ** (ath / 10.0))
    return theta, bins, levels


@dataclass(frozen=True)
class MaskingThresholdMap:
    theta: np.ndarray  # [frames, bins] dB on the clean signal's PSD scale
    ath: np.ndarray
    shift_db: float
    config_key: str
    maskers: tuple  # per frame: array of masker bins

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("masking threshold must be finite")
        if np.any(self.theta < self.ath[None, :]):
            raise ValueError("masking threshold dips below the threshold in quiet")


def masking_threshold(x: Waveform, cfg: StftConfig = StftConfig()) -> MaskingThresholdMap:
    psd = log_psd(x, cfg)
    freqs = cfg.bin_frequencies(x.sample_rate)
    barks = bark(freqs)
    ath = absolute_threshold(freqs)
    offsets = _tonal_offsets(freqs)
    thetas, maskers = [], []
    for row in psd.values:
        theta, bins, _ = frame_threshold(row, freqs, barks, ath, offsets)
        thetas.append(theta)
        maskers.append(bins)
    return MaskingThresholdMap(
        theta=np.stack(thetas),
        ath=ath,
        shift_db=psd.shift_db,
        config_key=cfg.key(),
        maskers=tuple(maskers),
    )


def _check(thresh: MaskingThresholdMap, cfg: StftConfig, n_frames: int):
    if thresh.config_key != cfg.key():
        raise ValueError("threshold map was computed with a different STFT config")
    if thresh.theta.shape[0] != n_frames:
        raise ValueError(
            f"threshold has {thresh.theta.shape[0]} frames but the input yields {n_frames}"
        )


def psy_excess(x, x_prime, thresh: MaskingThresholdMap, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Per-frame, per-bin ``p_{x'-x} - theta_x`` as a differentiable tensor."""
    xt, xp = as_tensor(x), as_tensor(x_prime)
    if xt.shape != xp.shape:
        raise ValueError("x and x_prime must have equal length")
    p = raw_log_psd(xp - xt, cfg) + thresh.shift_db
    _check(thresh, cfg, p.shape[0])
    return p - torch.as_tensor(thresh.theta)


def psy_loss_tensor(x, x_prime, thresh: MaskingThresholdMap, cfg: StftConfig = StftConfig(),
                    smooth: bool = True) -> torch.Tensor:
    excess = psy_excess(x, x_prime, thresh, cfg)
    if smooth:
        hinge = F.softplus(excess, beta=HINGE_SHARPNESS)
    else:
        hinge = torch.clamp(excess, min=0.0)
    return hinge.mean(dim=1).mean()


def psy_loss(x: Waveform, x_prime: Waveform, thresh: MaskingThresholdMap,
             cfg: StftConfig = StftConfig(), smooth: bool = False) -> float:
    """Mean over frames of the bin-averaged hinge ``max(0, p_{x'-x} - theta_x)``.

    ``smooth=True`` returns the softplus surrogate that the optimiser differentiates.
    """
    with torch.no_grad():
        return float(psy_loss_tensor(x, x_prime, thresh, cfg, smooth))


__all__ = [
    "MaskingThresholdMap",
    "absolute_threshold",
    "bark",
    "find_tonal_maskers",
    "masking_threshold",
    "psd_shift",
    "psy_loss",
    "psy_loss_tensor",
    "spreading",
]
