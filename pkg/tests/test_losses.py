import itertools
import math

import numpy as np
import pytest
import torch

from voiceshield.audio_io import Waveform
from voiceshield.losses import (
    CtcInfeasibleError,
    LossWeights,
    Objective,
    TranscriptTarget,
    asr_targeted_loss,
    cosine_similarity,
    ctc_min_frames,
    ctc_nll,
    feature_loss_targeted,
    feature_loss_untargeted,
    total_loss,
)
from voiceshield.models import MfccEmbedder
from voiceshield.models.estimators import EmbeddingVector, encode_text
from voiceshield.psychoacoustic import masking_threshold

from gradcheck import directional_check, rel_err


class FixedAsr:
    """Stand-in recogniser whose log-probabilities ignore the input."""

    def __init__(self, log_probs):
        self.lp = torch.as_tensor(log_probs, dtype=torch.float64)

    def log_probs(self, x):
        return self.lp


def _collapse(path):
    out, prev = [], None
    for s in path:
        if s != prev and s != 0:
            out.append(s)
        prev = s
    return out


def enumerate_nll(log_probs, labels):
    T, C = log_probs.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if _collapse(path) == list(labels):
            total += math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def test_ctc_matches_exhaustive_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for T in range(1, 7):
        for n in range(1, 4):
            for labels in itertools.product((1, 2), repeat=n):
                lp = _log_softmax(rng.normal(0, 2, (T, 3)))
                expected = enumerate_nll(lp, labels)
                if ctc_min_frames(labels) > T:
                    assert expected == math.inf
                    with pytest.raises(CtcInfeasibleError):
                        ctc_nll(torch.tensor(lp), labels)
                    continue
                got = asr_targeted_loss(FixedAsr(lp), None, TranscriptTarget(_text(labels)))
                assert got == pytest.approx(expected, abs=1e-9, rel=0)
                checked += 1
    assert checked > 50


def _text(labels):
    # label 1 -> " ", 2 -> "'": the first two alphabet symbols
    return "".join(" '"[v - 1] for v in labels)


def test_single_frame_hand_example():
    lp = np.log([[0.25, 0.75]])
    assert float(ctc_nll(torch.tensor(lp), [1])) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_two_frame_uniform_hand_example():
    lp = np.log(np.full((2, 2), 0.5))
    assert float(ctc_nll(torch.tensor(lp), [1])) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_gradient_wrt_log_probs():
    rng = np.random.default_rng(1)
    lp = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    labels = [1, 3, 3]
    (g,) = torch.autograd.grad(ctc_nll(lp, labels), lp)
    h = 1e-6
    num = np.zeros((6, 4))
    base = lp.detach().numpy()
    for t in range(6):
        for c in range(4):
            e = np.zeros((6, 4))
            e[t, c] = h
            num[t, c] = (float(ctc_nll(torch.tensor(base + e), labels))
                         - float(ctc_nll(torch.tensor(base - e), labels))) / (2 * h)
    assert np.allclose(g.numpy(), num, atol=1e-6)


def test_min_frames():
    assert ctc_min_frames([1, 2, 3]) == 3
    assert ctc_min_frames([1, 1]) == 3
    assert ctc_min_frames(encode_text("hello")) == 6


def test_cosine_examples():
    v = np.array([0.6, 0.8])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)
    assert cosine_similarity(EmbeddingVector(np.array([1.0, 0.0]), "a"),
                             EmbeddingVector(np.array([0.0, 1.0]), "b")) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity(np.ones(2), np.ones(3))


def test_transcript_target_validation():
    with pytest.raises(ValueError):
        TranscriptTarget("")
    with pytest.raises(ValueError):
        TranscriptTarget("Hello")
    with pytest.raises(ValueError):
        TranscriptTarget("hi", origin="made-up")


def test_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


# compositions on the trained stack -------------------------------------------------

@pytest.fixture(scope="module")
def pair(trained):
    corpus, stack = trained
    held = corpus.split("heldout")
    x = held[0].waveform
    other = next(r.waveform for r in held if r.speaker_id != held[0].speaker_id)
    return stack, x, other


def test_feature_loss_self_similarity(pair):
    stack, x, other = pair
    k = len(stack.encoders)
    assert feature_loss_untargeted(x, x, stack.encoders) == pytest.approx(k + 1, abs=1e-12)
    assert feature_loss_targeted(other, other, stack.encoders) == pytest.approx(-(k + 1), abs=1e-12)
    assert feature_loss_untargeted(x, other, stack.encoders) < k + 1


def test_total_loss_reduces_to_asr_term(pair):
    stack, x, _ = pair
    y_t = TranscriptTarget("the word")
    thresh = masking_threshold(x)
    rng = np.random.default_rng(2)
    xp = np.clip(x.samples + rng.uniform(-0.01, 0.01, len(x)), -1, 1)
    total, grad = total_loss(x, xp, "untargeted", stack.encoders, stack.asr, y_t, thresh,
                             LossWeights(alpha=0.0, beta=0.0))
    assert total == pytest.approx(asr_targeted_loss(stack.asr, Waveform(xp), y_t), rel=1e-12)
    assert grad.shape == (len(x),) and np.any(grad != 0)


def test_total_loss_at_clean_point(pair):
    stack, x, _ = pair
    y_t = TranscriptTarget("the word")
    k = len(stack.encoders)
    total, _ = total_loss(x, x.samples, "untargeted", stack.encoders, stack.asr, y_t,
                          masking_threshold(x), LossWeights(alpha=500.0, beta=0.0))
    expected = 500.0 * (k + 1) + asr_targeted_loss(stack.asr, x, y_t)
    assert total == pytest.approx(expected, rel=1e-12)


def test_targeted_objective_needs_reference(pair):
    stack, x, _ = pair
    with pytest.raises(ValueError):
        Objective(x, "targeted", stack.encoders, stack.asr, TranscriptTarget("a"), None)


# gradients per term and per architecture ------------------------------------------

def _objective(stack, x, reference, encoders, weights, mode="untargeted", thresh=None):
    return Objective(x, mode, encoders, stack.asr, TranscriptTarget("the word"), thresh, weights,
                     reference, MfccEmbedder())


def _crop(w, n):
    s = (len(w) - n) // 2
    return Waveform(np.array(w.samples[s:s + n]))


@pytest.mark.parametrize("which", [0, 1, 2])
@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
def test_feature_term_gradient(pair, which, mode):
    stack, x, other = pair
    x = _crop(x, 1600)
    enc = [stack.encoders[which]]
    ref = x if mode == "untargeted" else other
    obj = _objective(stack, x, ref, enc, LossWeights(alpha=1.0, beta=0.0, asr_coeff=0.0), mode)
    xp = x.samples + np.random.default_rng(which).uniform(-0.01, 0.01, 1600)
    for a, n in directional_check(lambda v: obj.components(v)["fea"], xp):
        assert rel_err(a, n) < 1e-3


def test_asr_term_gradient(pair):
    stack, x, _ = pair
    x = _crop(x, 1600)
    obj = _objective(stack, x, x, [], LossWeights(alpha=0.0, beta=0.0))
    xp = x.samples + np.random.default_rng(3).uniform(-0.01, 0.01, 1600)
    for a, n in directional_check(lambda v: obj.components(v)["asr"], xp):
        assert rel_err(a, n) < 1e-3


@pytest.mark.parametrize("term", ["psy", "l2"])
def test_perceptual_term_gradients(pair, term):
    stack, x, _ = pair
    x = _crop(x, 4096)
    obj = _objective(stack, x, x, [], LossWeights(alpha=0.0, beta=1.0, asr_coeff=0.0),
                     thresh=masking_threshold(x))
    xp = x.samples + np.random.default_rng(4).uniform(-0.02, 0.02, 4096)
    for a, n in directional_check(lambda v: obj.components(v)[term], xp):
        assert rel_err(a, n) < 1e-3


@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
def test_total_gradient(pair, mode):
    stack, x, other = pair
    x = _crop(x, 4096)
    ref = x if mode == "untargeted" else _crop(other, 4096)
    obj = _objective(stack, x, ref, stack.encoders, LossWeights(), mode, masking_threshold(x))
    xp = x.samples + np.random.default_rng(5).uniform(-0.02, 0.02, 4096)
    for a, n in directional_check(lambda v: obj.components(v)["total"], xp):
        assert rel_err(a, n) < 1e-3
    comps, grad = obj.value_and_grad(xp)
    assert set(comps) == {"asr", "fea", "psy", "l2", "total"}
    assert np.all(np.isfinite(grad))
