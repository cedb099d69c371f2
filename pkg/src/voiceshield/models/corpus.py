"""Synthetic multi-speaker fixtures corpus and manifest I/O.

Utterances are rendered with a tiny source-filter synthesiser: every letter
maps to a pair of formant centres, every speaker has its own pitch, vocal-tract
scale, spectral tilt and breathiness. That is enough structure for a
character-level CTC recogniser and for speaker encoders to learn something,
while staying small enough to train on a laptop CPU in seconds.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..audio_io import CANONICAL_RATE, Waveform, load_wav, save_wav, to_canonical

ALPHABET = " 'abcdefghijklmnopqrstuvwxyz"
BLANK = 0

_FORMANTS = (300.0, 430.0, 620.0, 900.0, 1300.0, 1880.0, 2700.0, 3900.0)
_LETTER_FORMANTS = dict(zip("abcdefghijklmnopqrstuvwxyz", itertools.combinations(_FORMANTS, 2)))
# 28 pairs from 8 centres cover every letter; a few letters add a noisy source
_FRICATIVES = {"s": 4600.0, "f": 5600.0, "z": 4200.0, "v": 5200.0, "x": 6200.0}

VOCABULARY = (
    "the a of to and in is it you that he was for on are as with his they at be this have "
    "from or one had by word but not what all were we when your can said there use an each "
    "which she do how their if will up other about out many then them these so some her would "
    "make like him into time has look two more write go see number no way could people my than "
    "first water been call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most very after thing "
    "our just name good sentence man think say great where help through much before line right "
    "too mean old any same tell boy follow came want show also around form three small set "
    "put end does another well large must big even such because turn here why ask went men "
    "read need land different home us move try kind hand picture again change off play spell "
    "air away animal house point page letter mother answer found study still learn should "
    "america world it's don't"
).split()

DEFAULT_DICTIONARY = (
    "open the window and let the morning light fall across the quiet kitchen table while "
    "the kettle hums a low song about rain on distant hills and small boats drifting home "
    "before the evening tide carries every lantern out toward the patient grey sea"
)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    tract_scale: float
    tilt_db_per_octave: float
    breathiness: float
    bandwidth: float


def default_speakers(n: int = 6) -> list[SpeakerProfile]:
    f0s = (105.0, 128.0, 158.0, 190.0, 226.0, 262.0, 118.0, 205.0)
    scales = (0.95, 1.05, 0.92, 1.02, 1.08, 0.98, 1.00, 0.96)
    tilts = (-4.0, -9.0, -6.0, -11.0, -3.0, -7.5, -12.0, -5.0)
    breath = (0.02, 0.08, 0.04, 0.12, 0.03, 0.06, 0.10, 0.015)
    bws = (70.0, 110.0, 90.0, 140.0, 60.0, 120.0, 80.0, 100.0)
    if not 1 <= n <= len(f0s):
        raise ValueError(f"between 1 and {len(f0s)} speakers supported")
    return [
        SpeakerProfile(f"spk{i:02d}", f0s[i], scales[i], tilts[i], breath[i], bws[i])
        for i in range(n)
    ]


def _segment(ch: str, spk: SpeakerProfile, f0: float, dur: float, rng, sr: int) -> np.ndarray:
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    if ch == " ":
        # word boundary: a soft broadband breath, distinct from leading/trailing silence
        return 0.15 * rng.standard_normal(n) * np.hanning(n)
    if ch == "'":
        burst = rng.standard_normal(n) * np.exp(-t / 0.006)
        return 0.6 * burst / (np.max(np.abs(burst)) + 1e-12)
    formants = [f * spk.tract_scale for f in _LETTER_FORMANTS[ch]]
    # vibrato and slight pitch declination inside the segment
    inst_f0 = f0 * (1.0 + 0.015 * np.sin(2 * np.pi * 5.0 * t)) * (1.0 - 0.04 * t / max(dur, 1e-3))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr
    out = np.zeros(n)
    for h in range(1, int(7600.0 / f0) + 1):
        fh = h * f0
        env = sum(np.exp(-0.5 * ((fh - fc) / (spk.bandwidth * (1 + fc / 3000.0))) ** 2) for fc in formants)
        tilt = 10.0 ** (spk.tilt_db_per_octave * np.log2(fh / 100.0) / 20.0)
        out += (env + 0.02) * tilt * np.sin(h * phase)
    out /= np.max(np.abs(out)) + 1e-12
    noise = rng.standard_normal(n)
    out += spk.breathiness * noise
    if ch in _FRICATIVES:
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec *= np.exp(-0.5 * ((freqs - _FRICATIVES[ch] * spk.tract_scale) / 500.0) ** 2)
        fric = np.fft.irfft(spec, n)
        out = 0.5 * out + 0.8 * fric / (np.max(np.abs(fric)) + 1e-12)
    ramp = min(int(0.018 * sr), n // 2)
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[-ramp:] = r[::-1]
    return out * env


def synthesize(text: str, spk: SpeakerProfile, seed: int, sr: int = CANONICAL_RATE,
               peak: float = 0.6) -> Waveform:
    """Render ``text`` (over :data:`ALPHABET`) in the voice of ``spk``."""
    bad = set(text) - set(ALPHABET)
    if bad:
        raise ValueError(f"characters outside the alphabet: {sorted(bad)}")
    rng = np.random.default_rng(seed)
    f0 = spk.f0 * (1.0 + rng.uniform(-0.04, 0.04))
    parts = [np.zeros(int(rng.uniform(0.06, 0.12) * sr))]
    for ch in text:
        dur = rng.uniform(0.065, 0.085) if ch != " " else rng.uniform(0.05, 0.07)
        parts.append(_segment(ch, spk, f0, dur, rng, sr))
        parts.append(np.zeros(int(0.012 * sr)))
    parts.append(np.zeros(int(rng.uniform(0.06, 0.12) * sr)))
    audio = np.concatenate(parts)
    audio = peak * audio / (np.max(np.abs(audio)) + 1e-12)
    return Waveform(audio, sr)


@dataclass(frozen=True)
class Utterance:
    waveform: Waveform
    transcript: str
    speaker_id: str
    split: str = "train"
    path: str = ""  # source file, or a stable identifier for synthesized records


@dataclass
class FixturesCorpus:
    records: list[Utterance]
    manifest_path: Path | None = None
    min_speakers: int = field(default=4, repr=False)
    min_utterances: int = field(default=40, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        speakers = {r.speaker_id for r in self.records}
        if len(speakers) < self.min_speakers:
            raise ValueError(f"corpus needs >= {self.min_speakers} speakers, found {len(speakers)}")
        if len(self.records) < self.min_utterances:
            raise ValueError(
                f"corpus needs >= {self.min_utterances} utterances, found {len(self.records)}"
            )
        for r in self.records:
            if set(r.transcript) - set(ALPHABET) or not r.transcript.strip():
                raise ValueError(f"transcript {r.transcript!r} is empty or outside the alphabet")
            if r.waveform.sample_rate != CANONICAL_RATE or r.waveform.duration < 0.5:
                raise ValueError("every utterance must be >= 0.5 s at 16 kHz")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[Utterance]:
        return [r for r in self.records if r.split == name]

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})


def make_fixtures(n_speakers: int = 6, per_speaker: int = 30, n_heldout: int = 4,
                  seed: int = 0) -> FixturesCorpus:
    """Generate the default fixtures corpus in memory."""
    rng = np.random.default_rng(seed)
    records = []
    for s_idx, spk in enumerate(default_speakers(n_speakers)):
        for u in range(per_speaker):
            text = ""
            while len(text) < 6:  # keeps every utterance comfortably above 0.5 s
                n_words = int(rng.integers(2, 4))
                words = [VOCABULARY[i] for i in rng.integers(0, len(VOCABULARY), size=n_words)]
                text = " ".join(words)
            wav = synthesize(text, spk, seed=seed * 100003 + s_idx * 1000 + u)
            split = "heldout" if u >= per_speaker - n_heldout else "train"
            records.append(Utterance(wav, text, spk.speaker_id, split, f"{spk.speaker_id}_{u:04d}"))
    return FixturesCorpus(records)


def write_corpus(corpus: FixturesCorpus, directory) -> Path:
    """Write WAVs plus ``manifest.csv`` (path, transcript, speaker_id, split)."""
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "transcript", "speaker_id", "split"])
        for i, r in enumerate(corpus.records):
            rel = f"wav/{r.speaker_id}_{i:04d}.wav"
            save_wav(r.waveform, directory / rel)
            writer.writerow([rel, r.transcript, r.speaker_id, r.split])
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = {"path", "transcript", "speaker_id"} - set(row)
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
    return rows


def load_corpus(manifest, min_speakers: int = 4, min_utterances: int = 40) -> FixturesCorpus:
    """Load a manifest; rows without a split column default to train."""
    manifest = Path(manifest)
    records = []
    for row in read_manifest(manifest):
        wav_path = Path(row["path"])
        if not wav_path.is_absolute():
            wav_path = manifest.parent / wav_path
        w = to_canonical(load_wav(wav_path))
        records.append(Utterance(w, row["transcript"].strip().lower(), row["speaker_id"],
                                 row.get("split") or "train", str(wav_path)))
    return FixturesCorpus(records, manifest, min_speakers, min_utterances)
