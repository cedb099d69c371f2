"""Portable checkpoints: an ``.npz`` array container plus a JSON sidecar.

The sidecar records the architecture, frontend, alphabet and the sha256 of the
array file; loading refuses a container whose digest does not match.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .estimators import CtcAsr, MfccEmbedder, SpeakerEncoder
from .networks import CtcNet

FORMAT_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(model, directory, name: str, extra: dict | None = None) -> Path:
    """Write ``<name>.npz`` and ``<name>.json``; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    if isinstance(model, MfccEmbedder):
        kind = "mfcc"
    elif isinstance(model, SpeakerEncoder):
        kind = "speaker-encoder"
    elif isinstance(model, CtcAsr):
        kind = "ctc-asr"
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    if kind != "mfcc":
        for k, v in model.net_.state_dict().items():
            arrays[f"net.{k}"] = v.detach().cpu().numpy()
        arrays["feat_mean"] = model.feat_mean_.numpy()
        arrays["feat_std"] = model.feat_std_.numpy()
    if kind == "speaker-encoder":
        arrays["classes"] = np.asarray(model.classes_, dtype=str)
    npz = directory / f"{name}.npz"
    with open(npz, "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "params": model.get_params(),
        "frontend": getattr(model, "frontend", "mfcc"),
        "stft": {"frame_length": 400, "hop_length": 160, "fft_size": 512, "window": "hann"},
        "sha256": _sha256(npz),
    }
    if kind == "ctc-asr":
        sidecar["alphabet"] = model.alphabet
        sidecar["blank_index"] = 0
    for attr in ("final_loss_", "train_accuracy_", "train_wer_"):
        if hasattr(model, attr):
            sidecar[attr.rstrip("_")] = getattr(model, attr)
    sidecar.update(extra or {})
    path = directory / f"{name}.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(sidecar_path):
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{sidecar_path}: unsupported checkpoint format")
    npz = sidecar_path.with_suffix(".npz")
    if _sha256(npz) != meta["sha256"]:
        raise ValueError(f"{npz}: digest does not match its sidecar")
    kind = meta["kind"]
    if kind == "mfcc":
        return MfccEmbedder(**meta["params"])
    data = np.load(npz)
    if kind == "speaker-encoder":
        model = SpeakerEncoder(**meta["params"])
        net = model._build()
        model.classes_ = data["classes"]
        model.train_accuracy_ = meta.get("train_accuracy")
    elif kind == "ctc-asr":
        model = CtcAsr(**meta["params"])
        net = CtcNet(model.n_mels, model.n_symbols)
        model.train_wer_ = meta.get("train_wer")
    else:
        raise ValueError(f"{sidecar_path}: unknown checkpoint kind {kind!r}")
    state = {k[4:]: torch.as_tensor(data[k]) for k in data.files if k.startswith("net.")}
    net = net.double()
    net.load_state_dict(state)
    model.net_ = net.eval()
    model.feat_mean_ = torch.as_tensor(data["feat_mean"])
    model.feat_std_ = torch.as_tensor(data["feat_std"])
    model.final_loss_ = meta.get("final_loss")
    return model
