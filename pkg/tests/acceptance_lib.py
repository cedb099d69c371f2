"""Experiment runners shared by the acceptance tests.

Each runner returns plain rows (dicts of floats/strings) so results can be
serialised to CSV and digested for the reproducibility check.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time

import numpy as np
import torch

from voiceshield.evaluate import run_battery
from voiceshield.evaluate.battery import reports_csv
from voiceshield.evaluate.metrics import sim, snr, wer
from voiceshield.losses import LossWeights, reference_embeddings
from voiceshield.models import make_fixtures, train_stack
from voiceshield.protect import (
    ProtectionConfig,
    SpeakerDatabase,
    argmin_similarity,
    protect,
)

SEED = 0
N_FIXTURES = 10


def build_stack(seed: int = SEED):
    corpus = make_fixtures(seed=seed)
    return corpus, train_stack(corpus, seed)


def heldout_fixtures(corpus, n: int = N_FIXTURES):
    """``n`` held-out utterances, evenly spaced through the held-out split."""
    held = corpus.split("heldout")
    idx = np.linspace(0, len(held) - 1, n).round().astype(int)
    return [held[i] for i in idx]


def build_database(corpus, stack):
    train = corpus.split("train")
    return SpeakerDatabase.build([(r.speaker_id, r.waveform, r.transcript) for r in train],
                                 stack.encoders, stack.mfcc)


def run_protection(stack, fixtures, mode="untargeted", weights=LossWeights(), db=None,
                   iterations=500, step_rule="pgd-accumulate", seed=SEED):
    cfg = ProtectionConfig(mode=mode, iterations=iterations, weights=weights,
                           step_rule=step_rule, seed=seed)
    return [protect(r.waveform, cfg, stack.encoders, stack.asr, db, stack.mfcc, i)
            for i, r in enumerate(fixtures)]


def score_rows(stack, fixtures, results):
    rows = []
    for r, res in zip(fixtures, results):
        rows.append({
            "utterance": r.path,
            "sim": sim(r.waveform, res.x_prime, stack.verifier),
            "wer": wer(r.transcript, stack.asr.transcribe(res.x_prime)),
            "clean_wer": wer(r.transcript, stack.asr.transcribe(r.waveform)),
            "snr": snr(r.waveform, res.x_prime),
            "linf": res.linf_achieved,
            "target": res.y_t.text,
        })
    return rows


def clean_pair_baseline(corpus, stack, fixtures):
    """Verifier SIM between each fixture and another clean utterance of the same speaker."""
    held = corpus.split("heldout")
    out = []
    for r in fixtures:
        other = next(u for u in held if u.speaker_id == r.speaker_id and u.path != r.path)
        out.append(sim(r.waveform, other.waveform, stack.verifier))
    return out


def targeted_rows(stack, db, fixtures, results):
    """Exhaustive argmin check and per-model similarity to the target before/after."""
    models = list(stack.encoders) + [stack.mfcc]
    rows = []
    with torch.no_grad():
        for r, res in zip(fixtures, results):
            q = [m.embed(r.waveform).numpy() for m in models]
            scan = [sum(float(a @ m.embed(rec.waveform).numpy()) for a, m in zip(q, models))
                    for rec in db.records]
            best = db.records[argmin_similarity(scan, [rec.speaker_id for rec in db.records])]
            target = next(rec for rec in db.records if rec.transcript == res.y_t.text
                          and rec.speaker_id == res.target_speaker_id)
            refs = reference_embeddings(stack.encoders, stack.mfcc, target.waveform)
            row = {"utterance": r.path, "selected": res.target_speaker_id,
                   "exhaustive": best.speaker_id, "exhaustive_text": best.transcript}
            for j, (m, e) in enumerate(zip(models, refs)):
                row[f"cs_before_{j}"] = float(m.embed(r.waveform) @ e)
                row[f"cs_after_{j}"] = float(m.embed(res.x_prime) @ e)
            rows.append(row)
    return rows


def battery_reports(stack, fixtures, results):
    return run_battery([r.waveform for r in fixtures], [res.x_prime for res in results],
                       [r.transcript for r in fixtures], stack.asr, stack.verifier)


def rows_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def run_criteria_6_to_9(corpus, stack):
    """All long-running experiments; returns (named CSV texts, raw results with timings)."""
    timings = {}
    fixtures = heldout_fixtures(corpus)
    db = build_database(corpus, stack)
    t = time.perf_counter()
    full = run_protection(stack, fixtures)
    untargeted = score_rows(stack, fixtures, full)
    timings["c6"] = time.perf_counter() - t
    t = time.perf_counter()
    targeted_res = run_protection(stack, fixtures, mode="targeted", db=db)
    targeted = targeted_rows(stack, db, fixtures, targeted_res)
    timings["c7"] = time.perf_counter() - t
    t = time.perf_counter()
    no_psy = score_rows(stack, fixtures, run_protection(stack, fixtures, weights=LossWeights(beta=0.0)))
    no_fea = score_rows(stack, fixtures, run_protection(stack, fixtures, weights=LossWeights(alpha=0.0)))
    timings["c8"] = time.perf_counter() - t
    t = time.perf_counter()
    reports = battery_reports(stack, fixtures, full)
    timings["c9"] = time.perf_counter() - t
    csvs = {
        "c6_untargeted": rows_csv(untargeted),
        "c7_targeted": rows_csv(targeted),
        "c8_beta0": rows_csv(no_psy),
        "c8_alpha0": rows_csv(no_fea),
        "c9_battery": reports_csv(reports),
    }
    raw = {"fixtures": fixtures, "untargeted": untargeted, "targeted": targeted,
           "beta0": no_psy, "alpha0": no_fea, "reports": reports, "timings": timings,
           "baseline": clean_pair_baseline(corpus, stack, fixtures)}
    return csvs, raw


def digest(csvs: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(csvs):
        h.update(name.encode())
        h.update(csvs[name].encode())
    return h.hexdigest()
