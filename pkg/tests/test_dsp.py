import math

import numpy as np
import pytest
import torch

from voiceshield import dsp
from voiceshield.audio_io import Waveform
from voiceshield.dsp import SPEECH_STFT, StftConfig

from conftest import tone

CFG = StftConfig()


def test_frame_count_and_short_input():
    spec = dsp.stft(Waveform(np.zeros(5000)), CFG)
    assert spec.shape == (1 + (5000 - 2048) // 512, 1025)
    with pytest.raises(ValueError):
        dsp.stft(Waveform(np.zeros(2047)), CFG)


def test_zero_input_gives_zero_spectrogram():
    assert torch.all(dsp.stft(Waveform(np.zeros(4096)), CFG) == 0)


@pytest.mark.parametrize("k", [5, 56, 300, 1000])
def test_bin_centred_sine_peaks_at_its_bin(k):
    w = tone(k * 16000 / 2048, n=8192)
    mag = dsp.stft(w, CFG).abs().numpy()
    assert np.all(mag.argmax(axis=1) == k)


def test_single_frame_matches_direct_dft(rng):
    x = rng.uniform(-1, 1, 2048)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(2048) / 2048)
    n = np.arange(2048)
    direct = np.array([np.sum(x * win * np.exp(-2j * np.pi * k * n / 2048)) for k in (0, 7, 512, 1024)])
    got = dsp.stft(Waveform(x), CFG)[0].numpy()[[0, 7, 512, 1024]]
    assert np.allclose(got, direct, rtol=1e-9, atol=1e-9)


def test_parseval(rng):
    x = rng.uniform(-0.5, 0.5, 6000)
    spec = dsp.stft(Waveform(x), CFG).numpy()
    # one-sided spectrum: double every bin except DC and Nyquist
    power = np.abs(spec) ** 2
    full = power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(axis=1)
    win = dsp.hann(2048).numpy()
    fr = np.lib.stride_tricks.sliding_window_view(x, 2048)[::512]
    energy = ((fr * win) ** 2).sum(axis=1) * 2048
    assert np.allclose(full, energy, rtol=1e-6)


def test_log_psd_silence_sits_at_floor():
    psd = dsp.log_psd(Waveform(np.zeros(4096)), CFG)
    assert np.allclose(psd.values - psd.shift_db, -200.0)


def test_log_psd_peak_maps_to_96():
    w = tone(56 * 16000 / 2048, n=8192)
    psd = dsp.log_psd(w, CFG)
    assert psd.values.max() == pytest.approx(96.0)
    assert np.all(psd.values.argmax(axis=1) == 56)
    # a full-scale bin-centred sine is the reference level itself
    assert psd.shift_db == pytest.approx(dsp.full_scale_shift(CFG), abs=1e-9)


def test_halving_lowers_psd_by_6db(rng):
    x = rng.uniform(-0.8, 0.8, 4096)
    a = dsp.raw_log_psd(Waveform(x), CFG).numpy()
    b = dsp.raw_log_psd(Waveform(0.5 * x), CFG).numpy()
    assert np.allclose(a - b, 20 * math.log10(2), atol=1e-9)


def test_explicit_shift_is_reused(rng):
    x = Waveform(rng.uniform(-0.1, 0.1, 4096))
    assert dsp.log_psd(x, CFG, shift_db=10.0).shift_db == 10.0


def test_mfcc_of_silence_is_dct_of_floor():
    m = dsp.mfcc(Waveform(np.zeros(1600))).values
    assert m.shape == (1 + (1600 - 400) // 160, 13)
    assert np.allclose(m[:, 0], math.sqrt(40) * math.log(1e-20))
    assert np.allclose(m[:, 1:], 0.0, atol=1e-9)


def test_mfcc_doubling_changes_only_c0(rng):
    x = rng.uniform(-0.4, 0.4, 3200)
    a = dsp.mfcc(Waveform(x)).values
    b = dsp.mfcc(Waveform(2 * x)).values
    assert np.allclose(b[:, 0] - a[:, 0], math.sqrt(40) * 2 * math.log(2))
    assert np.allclose(b[:, 1:], a[:, 1:], atol=1e-9)


def test_mfcc_distinguishes_signals():
    a = dsp.mfcc(tone(300, n=3200, amp=0.5)).values
    b = dsp.mfcc(tone(1700, n=3200, amp=0.5)).values
    assert not np.allclose(a, b)


def test_mfcc_rejects_too_many_coefficients():
    with pytest.raises(ValueError):
        dsp.mfcc(Waveform(np.zeros(1600)), n_mels=10, n_mfcc=13)


def test_filterbank_covers_spectrum():
    fb = dsp.mel_filterbank(40, SPEECH_STFT, 16000).numpy()
    assert fb.shape == (257, 40)
    assert np.all(fb.max(axis=0) > 0.5)
    assert np.allclose(dsp.mel_to_hz(dsp.hz_to_mel([0, 1000, 8000])), [0, 1000, 8000])


def test_dct_is_orthonormal():
    d = dsp.dct_matrix(40, 40).numpy()
    assert np.allclose(d.T @ d, np.eye(40), atol=1e-12)


def test_deterministic(rng):
    w = Waveform(rng.uniform(-1, 1, 4000))
    assert np.array_equal(dsp.mfcc(w).values, dsp.mfcc(w).values)
    assert np.array_equal(dsp.log_psd(w, CFG).values, dsp.log_psd(w, CFG).values)


def test_mfcc_gradient_matches_finite_differences(rng):
    x = torch.tensor(rng.uniform(-0.5, 0.5, 400), requires_grad=True)
    f = lambda v: dsp.mfcc_tensor(v).sum()  # noqa: E731
    (g,) = torch.autograd.grad(f(x), x)
    h = 1e-4
    for i in rng.choice(400, 10, replace=False):
        e = torch.zeros(400, dtype=torch.float64)
        e[i] = h
        with torch.no_grad():
            fd = (f(x + e) - f(x - e)) / (2 * h)
        assert float(g[i]) == pytest.approx(float(fd), rel=1e-3, abs=1e-6)
