"""Protection engine: target selection and sign-gradient optimisation under an l-inf budget."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import dsp
from .audio_io import PerturbationBudget, Waveform, load_wav, save_wav
from .losses import LossWeights, Objective, TranscriptTarget, ctc_min_frames
from .models.corpus import ALPHABET, DEFAULT_DICTIONARY
from .models.estimators import MfccEmbedder, greedy_decode
from .psychoacoustic import masking_threshold
from .validation import check_waveform, check_waveforms

log = logging.getLogger(__name__)

MODES = ("untargeted", "targeted")
STEP_RULES = ("literal-sign", "pgd-accumulate")


@dataclass(frozen=True)
class ProtectionConfig:
    mode: str = "untargeted"
    epsilon: float = 8 / 255
    iterations: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    step_rule: str = "pgd-accumulate"
    step_size: float | None = None
    seed: int = 0
    text_dictionary: str = DEFAULT_DICTIONARY

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        PerturbationBudget(self.epsilon)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.step <= self.epsilon:
            raise ValueError("step_size must lie in (0, epsilon]")

    @property
    def step(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else float(self.step_size)


def model_fingerprint(models) -> str:
    """Digest of every parameter tensor of ``models``; binds caches to checkpoints."""
    h = hashlib.sha256()
    for m in models:
        h.update(type(m).__name__.encode())
        net = getattr(m, "net_", None)
        if net is None:
            h.update(repr(m.get_params()).encode())
            continue
        for name, p in net.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
        for extra in ("feat_mean_", "feat_std_"):
            h.update(getattr(m, extra).numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    waveform: Waveform
    transcript: str
    embeddings: tuple  # one np.ndarray per encoder, then the MFCC embedding


class SpeakerDatabase:
    """Candidate target speakers with cached ensemble embeddings."""

    def __init__(self, records, fingerprint: str):
        self.records = list(records)
        self.fingerprint = fingerprint
        if len({r.speaker_id for r in self.records}) < 2:
            raise ValueError("speaker database needs at least two speakers")
        for r in self.records:
            for e in r.embeddings:
                if abs(np.linalg.norm(e) - 1.0) > 1e-6:
                    raise ValueError("cached embeddings must be unit norm")

    @classmethod
    def build(cls, utterances, encoders, mfcc=None):
        """``utterances``: iterable of (speaker_id, Waveform, transcript)."""
        mfcc = mfcc or MfccEmbedder()
        models = list(encoders) + [mfcc]
        records = []
        with torch.no_grad():
            for spk, w, text in utterances:
                embs = tuple(m.embed(w).numpy() for m in models)
                records.append(SpeakerRecord(spk, w, text, embs))
        return cls(records, model_fingerprint(models))

    def __len__(self):
        return len(self.records)

    def save(self, directory):
        """Write ``records.csv`` (with WAVs), ``embeddings.npz`` and ``meta.json``."""
        directory = Path(directory)
        (directory / "wav").mkdir(parents=True, exist_ok=True)
        arrays = {}
        with open(directory / "records.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "transcript", "speaker_id"])
            for i, r in enumerate(self.records):
                rel = f"wav/{i:04d}.wav"
                save_wav(r.waveform, directory / rel)
                writer.writerow([rel, r.transcript, r.speaker_id])
                for j, e in enumerate(r.embeddings):
                    arrays[f"r{i}_m{j}"] = e
        np.savez(directory / "embeddings.npz", **arrays)
        (directory / "meta.json").write_text(json.dumps(
            {"fingerprint": self.fingerprint, "n_records": len(self.records)}, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        data = np.load(directory / "embeddings.npz")
        records = []
        with open(directory / "records.csv", newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                n_models = sum(1 for k in data.files if k.startswith(f"r{i}_"))
                embs = tuple(data[f"r{i}_m{j}"] for j in range(n_models))
                records.append(SpeakerRecord(row["speaker_id"], load_wav(directory / row["path"]),
                                             row["transcript"], embs))
        return cls(records, meta["fingerprint"])

    def check_models(self, encoders, mfcc):
        if model_fingerprint(list(encoders) + [mfcc]) != self.fingerprint:
            raise ValueError("speaker database was built with different encoder checkpoints")


def argmin_similarity(sums, speaker_ids) -> int:
    """Index of the smallest similarity sum; ties go to the lowest speaker id."""
    sums = np.asarray(sums, dtype=np.float64)
    best = sums.min()
    tied = [i for i in range(len(sums)) if sums[i] == best]
    return min(tied, key=lambda i: (speaker_ids[i], i))


def similarity_sums(x: Waveform, db: SpeakerDatabase, encoders, mfcc=None) -> np.ndarray:
    mfcc = mfcc or MfccEmbedder()
    with torch.no_grad():
        query = [m.embed(x).numpy() for m in list(encoders) + [mfcc]]
    return np.array([sum(float(q @ e) for q, e in zip(query, r.embeddings)) for r in db.records])


def select_target_speaker(x: Waveform, db: SpeakerDatabase, encoders, mfcc=None):
    """Most dissimilar database record: ``(speaker_id, waveform, transcript)``."""
    if len(db) == 0:
        raise ValueError("speaker database is empty")
    mfcc = mfcc or MfccEmbedder()
    db.check_models(encoders, mfcc)
    sums = similarity_sums(x, db, encoders, mfcc)
    rec = db.records[argmin_similarity(sums, [r.speaker_id for r in db.records])]
    return rec.speaker_id, rec.waveform, rec.transcript


def make_untargeted_transcript(x: Waveform, asr, Y: str) -> TranscriptTarget:
    """Prefix of the dictionary text as long as the clean transcript."""
    clean = greedy_decode(asr, x)
    if not clean:
        raise ValueError("clean audio transcribes to an empty string; no target length")
    if len(Y) < len(clean):
        raise ValueError(f"dictionary has {len(Y)} characters, transcript needs {len(clean)}")
    return TranscriptTarget(Y[: len(clean)], "sliced-from-dictionary")


def fit_to_frames(y_t: TranscriptTarget, n_frames: int) -> TranscriptTarget:
    """Truncate a target that CTC cannot align within ``n_frames``."""
    text = y_t.text
    if ctc_min_frames(y_t.labels) <= n_frames:
        return y_t
    while text and ctc_min_frames(TranscriptTarget(text, y_t.origin).labels) > n_frames:
        text = text[:-1]
    warnings.warn(f"target transcript truncated to {len(text)} characters to fit {n_frames} frames")
    return TranscriptTarget(text, y_t.origin)


@dataclass
class ProtectionResult:
    x_prime: Waveform
    y_t: TranscriptTarget
    target_speaker_id: str | None
    loss_trace: list[dict]
    linf_achieved: float
    runtime: float
    best_iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if not np.all(np.abs(self.x_prime.samples) <= 1.0):
            raise ValueError("protected audio leaves [-1, 1]")

    def to_record(self, include_runtime: bool = True) -> dict:
        rec = {
            "target_text": self.y_t.text,
            "target_origin": self.y_t.origin,
            "target_speaker_id": self.target_speaker_id,
            "linf_achieved": self.linf_achieved,
            "best_iteration": self.best_iteration,
            "seed": self.seed,
            "loss_trace": self.loss_trace,
        }
        if include_runtime:
            rec["runtime_s"] = self.runtime
        return rec


def protect(x: Waveform, cfg: ProtectionConfig, encoders, asr, db: SpeakerDatabase | None = None,
            mfcc=None, utterance_index: int = 0) -> ProtectionResult:
    """Optimise a bounded perturbation of ``x`` against the encoder ensemble and the ASR."""
    start = time.perf_counter()
    x = check_waveform(x, min_samples=dsp.StftConfig().frame_length)
    mfcc = mfcc or MfccEmbedder()
    eps = cfg.epsilon
    seed = cfg.seed ^ utterance_index
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-eps, eps, size=len(x))

    target_id, reference = None, None
    if cfg.mode == "untargeted":
        y_t = make_untargeted_transcript(x, asr, cfg.text_dictionary)
    else:
        if db is None:
            raise ValueError("targeted mode needs a speaker database")
        target_id, reference, text = select_target_speaker(x, db, encoders, mfcc)
        y_t = TranscriptTarget(text, "transcript-of-target-speaker")
    y_t = fit_to_frames(y_t, asr.num_frames(len(x)))

    thresh = masking_threshold(x)
    obj = Objective(x, cfg.mode, encoders, asr, y_t, thresh, cfg.weights, reference, mfcc)

    xs = x.samples
    x_prime = np.clip(xs + delta, -1.0, 1.0)
    best_total, best_x, best_it = np.inf, x_prime, 0
    trace = []
    for it in range(cfg.iterations):
        comps, grad = obj.value_and_grad(x_prime)
        trace.append(comps)
        if comps["total"] < best_total:
            best_total, best_x, best_it = comps["total"], x_prime, it
        if cfg.step_rule == "literal-sign":
            delta = np.clip(-eps * np.sign(grad), -eps, eps)
        else:
            delta = np.clip(delta - cfg.step * np.sign(grad), -eps, eps)
        x_prime = np.clip(xs + delta, -1.0, 1.0)

    x_out = Waveform(np.clip(best_x, -1.0, 1.0), x.sample_rate)
    linf = float(np.max(np.abs(x_out.samples - xs)))
    if linf > eps + 1e-9:
        raise AssertionError(f"budget violated: {linf} > {eps}")
    return ProtectionResult(x_out, y_t, target_id, trace, linf, time.perf_counter() - start,
                            best_it, seed)


class VoiceProtector(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`protect`.

    The surrogate models are constructor parameters; ``fit`` only checks that
    they are trained (and builds nothing). ``transform`` maps a list of clean
    waveforms to protected ones, ``protect`` returns the full result.
    """

    def __init__(self, encoders=None, asr=None, speaker_db=None, mode="untargeted",
                 epsilon=8 / 255, iterations=500, alpha=500.0, beta=5e-3, l2_coeff=1.0,
                 asr_coeff=1.0, step_rule="pgd-accumulate", step_size=None, seed=0,
                 text_dictionary=DEFAULT_DICTIONARY):
        self.encoders = encoders
        self.asr = asr
        self.speaker_db = speaker_db
        self.mode = mode
        self.epsilon = epsilon
        self.iterations = iterations
        self.alpha = alpha
        self.beta = beta
        self.l2_coeff = l2_coeff
        self.asr_coeff = asr_coeff
        self.step_rule = step_rule
        self.step_size = step_size
        self.seed = seed
        self.text_dictionary = text_dictionary

    def config(self) -> ProtectionConfig:
        return ProtectionConfig(
            mode=self.mode, epsilon=self.epsilon, iterations=self.iterations,
            weights=LossWeights(self.alpha, self.beta, self.l2_coeff, self.asr_coeff),
            step_rule=self.step_rule, step_size=self.step_size, seed=self.seed,
            text_dictionary=self.text_dictionary,
        )

    def fit(self, X=None, y=None):
        if not self.encoders:
            raise ValueError("at least one speaker encoder is required")
        for m in list(self.encoders) + [self.asr]:
            if m is None or not hasattr(m, "net_"):
                raise ValueError("encoders and asr must be fitted before protecting")
        if set(self.text_dictionary) - set(ALPHABET):
            raise ValueError("text dictionary has characters outside the ASR alphabet")
        if self.mode == "targeted" and self.speaker_db is None:
            raise ValueError("targeted mode needs a speaker database")
        self.config_ = self.config()
        self.mfcc_ = MfccEmbedder()
        return self

    def protect(self, x: Waveform, index: int = 0) -> ProtectionResult:
        if not hasattr(self, "config_"):
            self.fit()
        return protect(x, self.config_, self.encoders, self.asr, self.speaker_db, self.mfcc_, index)

    def transform(self, X):
        X = check_waveforms(X)
        return [self.protect(w, i).x_prime for i, w in enumerate(X)]


def config_dict(cfg: ProtectionConfig) -> dict:
    d = asdict(cfg)
    d["step_size"] = cfg.step
    return d
