"""Bounded, psychoacoustically shaped perturbations that protect speech from voice cloning."""

from .audio_io import AudioError, PerturbationBudget, Waveform, load_wav, resample, save_wav
from .losses import LossWeights, TranscriptTarget, total_loss
from .protect import ProtectionConfig, ProtectionResult, SpeakerDatabase, VoiceProtector, protect
from .psychoacoustic import MaskingThresholdMap, masking_threshold, psy_loss

__version__ = "0.1.0"

__all__ = [
    "AudioError", "LossWeights", "MaskingThresholdMap", "PerturbationBudget", "ProtectionConfig",
    "ProtectionResult", "SpeakerDatabase", "TranscriptTarget", "VoiceProtector", "Waveform",
    "load_wav", "masking_threshold", "protect", "psy_loss", "resample", "save_wav", "total_loss",
]
