import numpy as np
import pytest

from voiceshield.audio_io import PerturbationBudget, Waveform
from voiceshield.losses import LossWeights, TranscriptTarget
from voiceshield.protect import (
    ProtectionConfig,
    SpeakerDatabase,
    VoiceProtector,
    argmin_similarity,
    config_dict,
    fit_to_frames,
    make_untargeted_transcript,
    protect,
    select_target_speaker,
)


class StubAsr:
    def __init__(self, text):
        self.text = text

    def transcribe(self, w):
        return self.text


@pytest.fixture(scope="module")
def setup(trained):
    corpus, stack = trained
    held = corpus.split("heldout")
    x = held[0].waveform
    return corpus, stack, x


def test_argmin_examples():
    assert argmin_similarity([2.1, -0.3], ["a", "b"]) == 1
    # ties resolve to the lowest speaker id
    assert argmin_similarity([0.5, 0.2, 0.2], ["c", "z", "b"]) == 2


def test_select_other_speaker(setup):
    corpus, stack, x = setup
    other = next(r for r in corpus.split("train") if r.speaker_id != corpus.split("heldout")[0].speaker_id)
    db = SpeakerDatabase.build([("self", x, "that"), (other.speaker_id, other.waveform, other.transcript)],
                               stack.encoders, stack.mfcc)
    spk, w, text = select_target_speaker(x, db, stack.encoders, stack.mfcc)
    assert spk == other.speaker_id and text == other.transcript
    assert np.array_equal(w.samples, other.waveform.samples)


def test_database_rejects_other_checkpoints(setup):
    corpus, stack, x = setup
    recs = corpus.split("train")[:2] + [r for r in corpus.split("train") if r.speaker_id == "spk01"][:1]
    db = SpeakerDatabase.build([(r.speaker_id, r.waveform, r.transcript) for r in recs],
                               stack.encoders[:2], stack.mfcc)
    with pytest.raises(ValueError):
        select_target_speaker(x, db, stack.encoders, stack.mfcc)


def test_database_roundtrip(setup, tmp_path):
    corpus, stack, x = setup
    recs = [r for r in corpus.split("train")][::20]
    db = SpeakerDatabase.build([(r.speaker_id, r.waveform, r.transcript) for r in recs],
                               stack.encoders, stack.mfcc)
    db.save(tmp_path)
    back = SpeakerDatabase.load(tmp_path)
    assert back.fingerprint == db.fingerprint and len(back) == len(db)
    for a, b in zip(db.records, back.records):
        assert a.speaker_id == b.speaker_id and a.transcript == b.transcript
        assert all(np.array_equal(p, q) for p, q in zip(a.embeddings, b.embeddings))


def test_untargeted_transcript_prefix():
    x = Waveform(np.zeros(1600))
    y = make_untargeted_transcript(x, StubAsr("hello"), "the quick brown fox")
    assert y.text == "the q" and y.origin == "sliced-from-dictionary"
    with pytest.raises(ValueError):
        make_untargeted_transcript(x, StubAsr(""), "the quick brown fox")
    with pytest.raises(ValueError):
        make_untargeted_transcript(x, StubAsr("a long transcript"), "short")


def test_fit_to_frames_truncates_with_warning():
    y = TranscriptTarget("aabb")  # needs 6 frames
    assert fit_to_frames(y, 6).text == "aabb"
    with pytest.warns(UserWarning):
        assert fit_to_frames(y, 4).text == "aab"


def test_config_validation():
    with pytest.raises(ValueError):
        ProtectionConfig(mode="sideways")
    with pytest.raises(ValueError):
        ProtectionConfig(step_rule="adam")
    with pytest.raises(ValueError):
        ProtectionConfig(iterations=0)
    with pytest.raises(ValueError):
        ProtectionConfig(step_size=1.0)
    cfg = ProtectionConfig()
    assert cfg.step == pytest.approx(cfg.epsilon / 10)
    assert config_dict(cfg)["step_size"] == cfg.step


def test_zero_gradient_keeps_initial_perturbation(setup):
    _, stack, x = setup
    cfg = ProtectionConfig(iterations=4, weights=LossWeights(alpha=0.0, beta=0.0, asr_coeff=0.0), seed=9)
    res = protect(x, cfg, stack.encoders, stack.asr, mfcc=stack.mfcc, utterance_index=3)
    delta0 = np.random.default_rng(9 ^ 3).uniform(-cfg.epsilon, cfg.epsilon, len(x))
    assert np.array_equal(res.x_prime.samples, np.clip(x.samples + delta0, -1, 1))
    assert all(t["total"] == 0.0 for t in res.loss_trace)


@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
@pytest.mark.parametrize("rule", ["literal-sign", "pgd-accumulate"])
def test_short_run_invariants(setup, mode, rule):
    corpus, stack, x = setup
    db = None
    if mode == "targeted":
        recs = corpus.split("train")[::15]
        db = SpeakerDatabase.build([(r.speaker_id, r.waveform, r.transcript) for r in recs],
                                   stack.encoders, stack.mfcc)
    cfg = ProtectionConfig(mode=mode, iterations=6, step_rule=rule)
    a = protect(x, cfg, stack.encoders, stack.asr, db, stack.mfcc)
    b = protect(x, cfg, stack.encoders, stack.asr, db, stack.mfcc)
    assert np.array_equal(a.x_prime.samples, b.x_prime.samples)
    assert a.loss_trace == b.loss_trace and len(a.loss_trace) == 6
    assert PerturbationBudget(cfg.epsilon).contains(x, a.x_prime)
    assert a.linf_achieved <= cfg.epsilon + 1e-9
    assert a.loss_trace[a.best_iteration]["total"] == min(t["total"] for t in a.loss_trace)
    rec = a.to_record(include_runtime=False)
    assert rec["seed"] == 0 and "runtime_s" not in rec
    if mode == "targeted":
        assert a.target_speaker_id is not None and a.y_t.origin == "transcript-of-target-speaker"


def test_targeted_needs_database(setup):
    _, stack, x = setup
    with pytest.raises(ValueError):
        protect(x, ProtectionConfig(mode="targeted", iterations=1), stack.encoders, stack.asr)


def test_voice_protector_estimator(setup):
    _, stack, x = setup
    with pytest.raises(ValueError):
        VoiceProtector().fit()
    est = VoiceProtector(encoders=stack.encoders, asr=stack.asr, iterations=2, seed=4)
    assert est.get_params()["iterations"] == 2
    out = est.fit().transform([x])
    assert len(out) == 1 and len(out[0]) == len(x)
    assert est.protect(x).seed == 4
    with pytest.raises(ValueError):
        est.transform([Waveform(np.zeros(10))])
