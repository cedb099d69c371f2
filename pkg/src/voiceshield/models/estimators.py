"""Scikit-learn style surrogate models: speaker encoders, MFCC extractor, CTC ASR.

Training runs in float32 for speed; fitted networks are promoted to float64 so
that gradients with respect to waveform samples are accurate enough for
finite-difference checks and for the protection optimiser.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .. import dsp
from ..audio_io import Waveform
from ..validation import check_waveforms
from .corpus import ALPHABET, BLANK
from .networks import ENCODER_ARCHS, CtcNet

log = logging.getLogger(__name__)

MIN_SAMPLES = dsp.SPEECH_STFT.frame_length


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding has non-finite entries")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("embedding must have unit l2 norm")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def frontend_features(x: torch.Tensor, kind: str, n_mels: int = 40, n_mfcc: int = 13) -> torch.Tensor:
    if x.shape[-1] < MIN_SAMPLES:
        raise ValueError(f"input of {x.shape[-1]} samples is shorter than {MIN_SAMPLES}")
    if kind == "logmel":
        return dsp.log_mel(x, dsp.SPEECH_STFT, n_mels)
    if kind == "mfcc":
        return dsp.mfcc_tensor(x, dsp.SPEECH_STFT, n_mels, n_mfcc)
    raise ValueError(f"unknown frontend {kind!r}")


def _pad(feats: list[torch.Tensor]):
    lengths = torch.tensor([f.shape[0] for f in feats])
    batch = torch.nn.utils.rnn.pad_sequence(feats, batch_first=True)
    mask = torch.arange(batch.shape[1])[None, :] < lengths[:, None]
    return batch, mask, lengths


class _FrontendMixin:
    """Feature extraction with training-set mean/variance normalisation."""

    def _raw_features(self, x: torch.Tensor) -> torch.Tensor:
        return frontend_features(x, self.frontend, self.n_mels, self.n_mfcc)

    def _fit_normaliser(self, feats):
        stacked = torch.cat(feats, dim=0)
        self.feat_mean_ = stacked.mean(dim=0)
        self.feat_std_ = stacked.std(dim=0) + 1e-5

    def _normalise(self, f: torch.Tensor) -> torch.Tensor:
        return (f - self.feat_mean_.to(f.dtype)) / self.feat_std_.to(f.dtype)

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")


def _seeded(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


class SpeakerEncoder(_FrontendMixin, TransformerMixin, BaseEstimator):
    """Speaker embedding network trained by speaker classification.

    ``fit(X, y)`` takes waveforms and speaker labels; ``transform(X)`` returns
    unit-norm embeddings ``[n, dim]``. The classifier head is dropped after
    training.
    """

    def __init__(self, arch="conv", frontend="logmel", dim=64, n_mels=40, n_mfcc=13,
                 epochs=60, batch_size=16, lr=3e-3, seed=0):
        self.arch = arch
        self.frontend = frontend
        self.dim = dim
        self.n_mels = n_mels
        self.n_mfcc = n_mfcc
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    @property
    def source_id(self) -> str:
        return f"{self.arch}-{self.frontend}-s{self.seed}"

    def _n_feat(self):
        return self.n_mels if self.frontend == "logmel" else self.n_mfcc

    def _build(self):
        if self.arch not in ENCODER_ARCHS:
            raise ValueError(f"unknown encoder architecture {self.arch!r}")
        return ENCODER_ARCHS[self.arch](self._n_feat(), self.dim)

    def fit(self, X, y):
        X = check_waveforms(X, min_samples=MIN_SAMPLES)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two speakers to train an encoder")
        labels = torch.as_tensor(np.searchsorted(self.classes_, y))
        rng = _seeded(self.seed)
        with torch.no_grad():
            raw = [self._raw_features(dsp.as_tensor(w)) for w in X]
        self._fit_normaliser(raw)
        feats = [self._normalise(f).float() for f in raw]

        net = self._build().float()
        head = torch.nn.Linear(self.dim, len(self.classes_)).float()
        opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=self.lr)
        n = len(feats)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                batch, mask, _ = _pad([feats[i] for i in idx])
                emb = torch.nn.functional.normalize(net(batch, mask), dim=-1)
                loss = torch.nn.functional.cross_entropy(head(10.0 * emb), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.final_loss_ = total / n

        net.eval()
        with torch.no_grad():
            batch, mask, _ = _pad(feats)
            emb = torch.nn.functional.normalize(net(batch, mask), dim=-1)
            pred = head(10.0 * emb).argmax(dim=-1)
        self.train_accuracy_ = float((pred == labels).double().mean())
        self.net_ = net.double()
        self.feat_mean_ = self.feat_mean_.double()
        self.feat_std_ = self.feat_std_.double()
        log.info("encoder %s: loss %.4f, train accuracy %.3f", self.source_id,
                 self.final_loss_, self.train_accuracy_)
        return self

    def embed(self, x) -> torch.Tensor:
        """Differentiable unit-norm embedding of one waveform (tensor or Waveform)."""
        self._check_fitted()
        x = dsp.as_tensor(x)
        f = self._normalise(self._raw_features(x))
        return torch.nn.functional.normalize(self.net_(f[None]), dim=-1)[0]

    def encode(self, w: Waveform) -> EmbeddingVector:
        with torch.no_grad():
            return EmbeddingVector(self.embed(w).numpy(), self.source_id)

    def transform(self, X):
        X = check_waveforms(X, min_samples=MIN_SAMPLES)
        return np.stack([self.encode(w).values for w in X])


class MfccEmbedder(TransformerMixin, BaseEstimator):
    """Parameter-free feature extractor: frame-averaged MFCC, l2-normalised."""

    def __init__(self, n_mels=40, n_mfcc=13):
        self.n_mels = n_mels
        self.n_mfcc = n_mfcc

    source_id = "mfcc"

    def fit(self, X=None, y=None):
        return self

    def embed(self, x) -> torch.Tensor:
        x = dsp.as_tensor(x)
        if x.shape[-1] < MIN_SAMPLES:
            raise ValueError(f"input of {x.shape[-1]} samples is shorter than {MIN_SAMPLES}")
        m = dsp.mfcc_tensor(x, dsp.SPEECH_STFT, self.n_mels, self.n_mfcc)
        return torch.nn.functional.normalize(m.mean(dim=0), dim=-1)

    def encode(self, w: Waveform) -> EmbeddingVector:
        with torch.no_grad():
            return EmbeddingVector(self.embed(w).numpy(), self.source_id)

    def transform(self, X):
        X = check_waveforms(X, min_samples=MIN_SAMPLES)
        return np.stack([self.encode(w).values for w in X])


def mfcc_embed(w: Waveform) -> EmbeddingVector:
    return MfccEmbedder().encode(w)


def ctc_collapse(symbols) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for s in symbols:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


def encode_text(text: str, alphabet: str = ALPHABET) -> list[int]:
    bad = set(text) - set(alphabet)
    if bad:
        raise ValueError(f"characters outside the ASR alphabet: {sorted(bad)}")
    return [alphabet.index(c) + 1 for c in text]


def decode_labels(labels, alphabet: str = ALPHABET) -> str:
    return "".join(alphabet[i - 1] for i in labels)


class CtcAsr(_FrontendMixin, BaseEstimator):
    """Character-level CTC recogniser over lowercase letters, space and apostrophe.

    Symbol 0 is the blank; symbol ``i > 0`` is ``alphabet[i - 1]``.
    """

    def __init__(self, alphabet=ALPHABET, n_mels=40, epochs=60, batch_size=4, lr=3e-3, seed=0):
        self.alphabet = alphabet
        self.n_mels = n_mels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    frontend = "logmel"
    n_mfcc = 13

    @property
    def n_symbols(self) -> int:
        return len(self.alphabet) + 1

    def _init_untrained(self, X):
        """Random-weight model with normalisation fitted on ``X`` (a WER baseline)."""
        _seeded(self.seed)
        with torch.no_grad():
            raw = [self._raw_features(dsp.as_tensor(w)) for w in X]
        self._fit_normaliser(raw)
        self.net_ = CtcNet(self.n_mels, self.n_symbols).double().eval()
        return self

    def fit(self, X, y):
        X = check_waveforms(X, min_samples=MIN_SAMPLES)
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        targets = [torch.as_tensor(encode_text(t, self.alphabet)) for t in y]
        rng = _seeded(self.seed)
        with torch.no_grad():
            raw = [self._raw_features(dsp.as_tensor(w)) for w in X]
        self._fit_normaliser(raw)
        feats = [self._normalise(f).float() for f in raw]
        for f, t in zip(feats, targets):
            if len(t) > f.shape[0]:
                raise ValueError("a transcript is longer than its utterance has frames")

        net = CtcNet(self.n_mels, self.n_symbols).float()
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=self.epochs)
        n = len(feats)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                batch, mask, lengths = _pad([feats[i] for i in idx])
                lp = net(batch, mask)
                tgt = [targets[i] for i in idx]
                loss = torch.nn.functional.ctc_loss(
                    lp.transpose(0, 1), torch.cat(tgt), lengths,
                    torch.tensor([len(t) for t in tgt]), blank=BLANK, reduction="mean",
                    zero_infinity=True,
                )
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(net.parameters(), 5.0)
                opt.step()
                total += loss.item() * len(idx)
            sched.step()
            self.final_loss_ = total / n

        self.net_ = net.double().eval()
        self.feat_mean_ = self.feat_mean_.double()
        self.feat_std_ = self.feat_std_.double()
        from ..evaluate.metrics import wer

        hyps = self.predict(X)
        self.train_wer_ = float(np.mean([wer(r, h) for r, h in zip(y, hyps)]))
        log.info("asr: loss %.4f, train WER %.2f%%", self.final_loss_, self.train_wer_)
        return self

    def log_probs(self, x) -> torch.Tensor:
        """Differentiable ``[frames, symbols]`` log-probabilities."""
        self._check_fitted()
        f = self._normalise(self._raw_features(dsp.as_tensor(x)))
        return self.net_(f[None])[0]

    def num_frames(self, n_samples: int) -> int:
        return dsp.SPEECH_STFT.num_frames(n_samples)

    def transcribe(self, w) -> str:
        with torch.no_grad():
            best = self.log_probs(w).argmax(dim=-1).numpy()
        return decode_labels(ctc_collapse(best), self.alphabet)

    def predict(self, X):
        X = check_waveforms(X, min_samples=MIN_SAMPLES)
        return [self.transcribe(w) for w in X]


def asr_log_probs(asr: CtcAsr, w: Waveform) -> np.ndarray:
    with torch.no_grad():
        return asr.log_probs(w).numpy()


def greedy_decode(asr: CtcAsr, w: Waveform) -> str:
    return asr.transcribe(w)


def encode(enc, w: Waveform) -> EmbeddingVector:
    return enc.encode(w)
