"""Surrogate encoders, CTC recogniser, fixtures corpus and the trained stack."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import ALPHABET, BLANK, FixturesCorpus, Utterance, load_corpus, make_fixtures, write_corpus
from .estimators import (
    CtcAsr,
    EmbeddingVector,
    MfccEmbedder,
    SpeakerEncoder,
    asr_log_probs,
    ctc_collapse,
    encode,
    greedy_decode,
    mfcc_embed,
)

# (name, architecture, frontend, seed offset); the verifier is held out of the ensemble
ENSEMBLE = (
    ("enc_conv_logmel", "conv", "logmel", 1),
    ("enc_recurrent_mfcc", "recurrent", "mfcc", 2),
    ("enc_conv_mfcc", "conv", "mfcc", 3),
)
VERIFIER = ("verifier_tdnn_logmel", "tdnn", "logmel", 4)
ASR_NAME = "asr_ctc"
ASR_SEED_OFFSET = 5


def _train_split(corpus: FixturesCorpus):
    corpus.validate()
    train = corpus.split("train") or list(corpus)
    return train


def train_speaker_encoder(corpus: FixturesCorpus, arch: str = "conv", seed: int = 0,
                          frontend: str = "logmel", **kw) -> SpeakerEncoder:
    train = _train_split(corpus)
    return SpeakerEncoder(arch=arch, frontend=frontend, seed=seed, **kw).fit(
        [r.waveform for r in train], [r.speaker_id for r in train]
    )


def train_asr(corpus: FixturesCorpus, seed: int = 0, **kw) -> CtcAsr:
    train = _train_split(corpus)
    return CtcAsr(seed=seed, **kw).fit([r.waveform for r in train], [r.transcript for r in train])


@dataclass
class SurrogateStack:
    encoders: list
    verifier: SpeakerEncoder
    asr: CtcAsr
    mfcc: MfccEmbedder = field(default_factory=MfccEmbedder)
    seed: int = 0

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        extra = {"seed": self.seed}
        paths = [save_checkpoint(e, directory, name, extra)
                 for e, (name, *_rest) in zip(self.encoders, ENSEMBLE)]
        paths.append(save_checkpoint(self.verifier, directory, VERIFIER[0], extra))
        paths.append(save_checkpoint(self.asr, directory, ASR_NAME, extra))
        return paths

    @classmethod
    def load(cls, directory, seed: int = 0) -> "SurrogateStack":
        directory = Path(directory)
        names = [n for n, *_ in ENSEMBLE] + [VERIFIER[0], ASR_NAME]
        missing = [n for n in names if not (directory / f"{n}.json").exists()]
        if missing:
            raise FileNotFoundError(f"{directory}: missing checkpoints {missing}")
        encoders = [load_checkpoint(directory / f"{n}.json") for n, *_ in ENSEMBLE]
        return cls(encoders, load_checkpoint(directory / f"{VERIFIER[0]}.json"),
                   load_checkpoint(directory / f"{ASR_NAME}.json"), MfccEmbedder(), seed)


def train_stack(corpus: FixturesCorpus, seed: int = 0, epochs: int | None = None) -> SurrogateStack:
    """Train the ensemble, the verifier and the recogniser; ``epochs`` overrides all defaults."""
    kw = {} if epochs is None else {"epochs": epochs}
    encoders = [train_speaker_encoder(corpus, arch, seed + off, frontend, **kw)
                for _name, arch, frontend, off in ENSEMBLE]
    _, arch, frontend, off = VERIFIER
    verifier = train_speaker_encoder(corpus, arch, seed + off, frontend, **kw)
    asr = train_asr(corpus, seed + ASR_SEED_OFFSET, **kw)
    return SurrogateStack(encoders, verifier, asr, MfccEmbedder(), seed)


__all__ = [
    "ALPHABET", "BLANK", "CtcAsr", "EmbeddingVector", "FixturesCorpus", "MfccEmbedder",
    "SpeakerEncoder", "SurrogateStack", "Utterance", "asr_log_probs", "ctc_collapse", "encode",
    "greedy_decode", "load_checkpoint", "load_corpus", "make_fixtures", "mfcc_embed",
    "save_checkpoint", "train_asr", "train_speaker_encoder", "train_stack", "write_corpus",
]
