"""Robustness battery: transform protected audio, then score WER / SIM / SNR per kind."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import KINDS, OPTIONAL_KINDS, AugmentationSkipped, augment
from .metrics import sim, snr, wer

COLUMNS = ("kind", "label", "wer", "sim", "snr", "n", "skipped")


@dataclass
class MetricReport:
    kind: str
    wer: float | None
    sim: float | None
    snr: float | None
    n: int
    per_utterance: list[dict] = field(default_factory=list)
    skipped: bool = False

    def __post_init__(self):
        if self.wer is not None and self.wer < 0:
            raise ValueError("wer must be non-negative")
        if self.sim is not None and not -1.0 - 1e-12 <= self.sim <= 1.0 + 1e-12:
            raise ValueError("sim must lie in [-1, 1]")

    @property
    def label(self) -> str:
        return {**KINDS, **OPTIONAL_KINDS, "none": "w/o"}.get(self.kind, self.kind)

    def row(self) -> dict:
        return {"kind": self.kind, "label": self.label, "wer": self.wer, "sim": self.sim,
                "snr": self.snr, "n": self.n, "skipped": self.skipped}


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def score(clean, processed, references, asr, verifier, kind: str = "none") -> MetricReport:
    """Score processed audio against clean audio and reference transcripts."""
    rows = []
    for x, xp, ref in zip(clean, processed, references):
        rows.append({
            "wer": wer(ref, asr.transcribe(xp)),
            "sim": sim(x, xp, verifier),
            "snr": snr(x, xp) if len(x) == len(xp) else None,
        })
    return MetricReport(kind, _mean(r["wer"] for r in rows), _mean(r["sim"] for r in rows),
                        _mean(r["snr"] for r in rows), len(rows), rows)


def run_battery(clean, protected, references, asr, verifier, kinds=tuple(KINDS),
                params: dict | None = None) -> list[MetricReport]:
    """One report per kind, preceded by the untransformed ("none") row."""
    clean, protected, references = list(clean), list(protected), list(references)
    if not (len(clean) == len(protected) == len(references)):
        raise ValueError("clean, protected and reference lists are misaligned")
    for x, xp in zip(clean, protected):
        if len(x) != len(xp) or x.sample_rate != xp.sample_rate:
            raise ValueError("clean and protected audio differ in length or rate")
    params = params or {}
    reports = []
    for kind in ["none"] + [k for k in kinds if k != "none"]:
        try:
            processed = [augment(w, kind, params.get(kind)) for w in protected]
        except AugmentationSkipped:
            reports.append(MetricReport(kind, None, None, None, 0, skipped=True))
            continue
        reports.append(score(clean, processed, references, asr, verifier, kind))
    return reports


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in reports:
        row = r.row()
        writer.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def reports_json(reports, extra: dict | None = None) -> str:
    doc = {"rows": [r.row() for r in reports],
           "per_utterance": {r.kind: r.per_utterance for r in reports}}
    doc.update(extra or {})
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_reports(reports, directory, stem: str = "battery", extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
    csv_path.write_text(reports_csv(reports))
    json_path.write_text(reports_json(reports, extra))
    return csv_path, json_path


def read_reports(json_path) -> list[MetricReport]:
    doc = json.loads(Path(json_path).read_text())
    per = doc.get("per_utterance", {})
    return [MetricReport(r["kind"], r["wer"], r["sim"], r["snr"], r["n"], per.get(r["kind"], []),
                         r.get("skipped", False)) for r in doc["rows"]]
