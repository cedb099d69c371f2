"""Protection objective: feature similarity, targeted CTC, masking hinge and l2 terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import dsp
from .audio_io import Waveform
from .models.corpus import ALPHABET, BLANK
from .models.estimators import EmbeddingVector, MfccEmbedder, encode_text
from .psychoacoustic import MaskingThresholdMap, psy_loss_tensor

class CtcInfeasibleError(ValueError):
    """Target label sequence needs more frames than the audio provides."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 500.0
    beta: float = 5e-3
    l2_coeff: float = 1.0
    asr_coeff: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "l2_coeff", "asr_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class TranscriptTarget:
    text: str
    origin: str = "sliced-from-dictionary"

    def __post_init__(self):
        if not self.text:
            raise ValueError("target transcript must be non-empty")
        bad = set(self.text) - set(ALPHABET)
        if bad:
            raise ValueError(f"target transcript has characters outside the alphabet: {sorted(bad)}")
        if self.origin not in ("sliced-from-dictionary", "transcript-of-target-speaker"):
            raise ValueError(f"unknown transcript origin {self.origin!r}")

    @property
    def labels(self) -> list[int]:
        return encode_text(self.text)


def cosine_similarity(a, b) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, EmbeddingVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    return float(np.clip(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)), -1.0, 1.0))


def ctc_min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _extend(labels, blank):
    ext = [blank]
    for v in labels:
        ext += [v, blank]
    ext = np.asarray(ext)
    # s-2 -> s skips are allowed onto a label that differs from the label two back
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def ctc_forward_backward(log_probs: np.ndarray, labels, blank: int = BLANK):
    """Log-space alpha/beta lattices over the blank-augmented labels.

    Both lattices include the emission at their own frame. Returns
    ``(log_likelihood, alpha, beta, ext)``.
    """
    T = log_probs.shape[0]
    ext, skip = _extend(labels, blank)
    S = len(ext)
    emit = log_probs[:, ext]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, :2] = emit[0, :2]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[skip] = np.logaddexp(acc[skip], prev[np.flatnonzero(skip) - 2])
        alpha[t] = acc + emit[t]
    beta[T - 1, -2:] = emit[T - 1, -2:]
    skip_from = np.flatnonzero(skip) - 2  # states that may jump forward by two
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[skip_from] = np.logaddexp(acc[skip_from], nxt[skip_from + 2])
        beta[t] = acc + emit[t]
    ll = np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2])
    return ll, alpha, beta, ext


class _CtcNll(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, labels, blank):
        lp = log_probs.detach().cpu().numpy().astype(np.float64)
        ll, alpha, beta, ext = ctc_forward_backward(lp, labels, blank)
        # occupancy of each (frame, symbol): sum over lattice states carrying that symbol
        post = np.exp(alpha + beta - lp[:, ext] - ll)
        grad = np.zeros_like(lp)
        np.add.at(grad.T, ext, post.T)
        ctx.save_for_backward(torch.as_tensor(-grad, dtype=log_probs.dtype))
        return torch.as_tensor(-ll, dtype=log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None


def ctc_nll(log_probs: torch.Tensor, labels, blank: int = BLANK) -> torch.Tensor:
    """Negative log-likelihood of ``labels`` under per-frame ``log_probs [T, C]``.

    Differentiable with respect to ``log_probs``; the gradient is the negated
    state occupancy from the forward-backward lattices.
    """
    labels = [int(v) for v in labels]
    T = log_probs.shape[0]
    if not labels:
        raise CtcInfeasibleError("empty label sequence")
    if ctc_min_frames(labels) > T:
        raise CtcInfeasibleError(
            f"{len(labels)} labels need {ctc_min_frames(labels)} frames, only {T} available"
        )
    return _CtcNll.apply(log_probs, labels, blank)


def asr_targeted_loss(asr, x_prime, y_t: TranscriptTarget) -> float:
    with torch.no_grad():
        return float(ctc_nll(asr.log_probs(x_prime), y_t.labels))


def _similarity_sum(encoders, mfcc, refs, x_prime: torch.Tensor) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for enc, ref in zip(list(encoders) + [mfcc], refs):
        total = total + torch.dot(enc.embed(x_prime), ref)
    return total


def reference_embeddings(encoders, mfcc, w) -> list[torch.Tensor]:
    with torch.no_grad():
        return [e.embed(w) for e in list(encoders) + [mfcc]]


def feature_loss_untargeted(x: Waveform, x_prime: Waveform, encoders, mfcc=None) -> float:
    """Sum of self-similarities between clean and protected audio over the ensemble plus MFCC."""
    mfcc = mfcc or MfccEmbedder()
    refs = reference_embeddings(encoders, mfcc, x)
    with torch.no_grad():
        return float(_similarity_sum(encoders, mfcc, refs, dsp.as_tensor(x_prime)))


def feature_loss_targeted(x_t: Waveform, x_prime: Waveform, encoders, mfcc=None) -> float:
    """Negated similarity sum towards the target speaker's utterance."""
    mfcc = mfcc or MfccEmbedder()
    refs = reference_embeddings(encoders, mfcc, x_t)
    with torch.no_grad():
        return -float(_similarity_sum(encoders, mfcc, refs, dsp.as_tensor(x_prime)))


@dataclass
class Objective:
    """The full protection objective with its constants cached.

    ``reference`` is the clean audio for untargeted mode and the target
    speaker's audio for targeted mode.
    """

    x: Waveform
    mode: str
    encoders: list
    asr: object
    y_t: TranscriptTarget | None
    thresh: MaskingThresholdMap | None
    weights: LossWeights = field(default_factory=LossWeights)
    reference: Waveform | None = None
    mfcc: MfccEmbedder = field(default_factory=MfccEmbedder)
    psy_cfg: dsp.StftConfig = field(default_factory=dsp.StftConfig)

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "targeted" and self.reference is None:
            raise ValueError("targeted mode needs the target speaker's audio")
        ref = self.x if self.mode == "untargeted" else self.reference
        self._sign = 1.0 if self.mode == "untargeted" else -1.0
        self._x = dsp.as_tensor(self.x)
        self._refs = reference_embeddings(self.encoders, self.mfcc, ref) if self.encoders is not None else []
        self._labels = self.y_t.labels if self.y_t is not None else None

    def components(self, x_prime: torch.Tensor) -> dict:
        w = self.weights
        zero = torch.zeros((), dtype=torch.float64)
        out = {}
        if w.asr_coeff > 0 and self._labels is not None:
            out["asr"] = ctc_nll(self.asr.log_probs(x_prime), self._labels)
        else:
            out["asr"] = zero
        if w.alpha > 0:
            out["fea"] = self._sign * _similarity_sum(self.encoders, self.mfcc, self._refs, x_prime)
        else:
            out["fea"] = zero
        delta = x_prime - self._x
        if w.beta > 0 and self.thresh is not None:
            out["psy"] = psy_loss_tensor(self._x, x_prime, self.thresh, self.psy_cfg, smooth=True)
        else:
            out["psy"] = zero
        out["l2"] = torch.linalg.vector_norm(delta) if w.beta > 0 else zero
        out["total"] = (
            w.asr_coeff * out["asr"] + w.alpha * out["fea"]
            + w.beta * (out["psy"] + w.l2_coeff * out["l2"])
        )
        return out

    def value_and_grad(self, x_prime) -> tuple[dict, np.ndarray]:
        xp = dsp.as_tensor(x_prime).detach().clone().requires_grad_(True)
        comps = self.components(xp)
        total = comps["total"]
        if total.requires_grad:
            (grad,) = torch.autograd.grad(total, xp)
        else:
            grad = torch.zeros_like(xp)
        return {k: float(v.detach()) for k, v in comps.items()}, grad.numpy()


def total_loss(x, x_prime, mode, encoders, asr, y_t, thresh, weights=LossWeights(),
               reference=None, mfcc=None):
    """Return ``(total, gradient w.r.t. x_prime)`` for one evaluation of the objective."""
    obj = Objective(x, mode, encoders, asr, y_t, thresh, weights, reference, mfcc or MfccEmbedder())
    comps, grad = obj.value_and_grad(x_prime)
    return comps["total"], grad
