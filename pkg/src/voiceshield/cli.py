"""Command-line entry point: corpus, train, protect, evaluate, augment, report, threshold.

Every run is driven by an INI document with a ``[run]`` section; each key can be
overridden by the flag of the same name (underscores become dashes). Relative
paths in the config resolve against the config file's directory.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .audio_io import PerturbationBudget, load_wav, save_wav, to_canonical
from .evaluate import KINDS, augment, read_reports, run_battery, write_reports
from .evaluate.battery import reports_csv
from .losses import LossWeights
from .models import SurrogateStack, load_corpus, make_fixtures, train_stack, write_corpus
from .models.corpus import read_manifest
from .protect import MODES, STEP_RULES, ProtectionConfig, SpeakerDatabase, config_dict, protect
from .psychoacoustic import masking_threshold

log = logging.getLogger("voiceshield")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
PATH_KEYS = ("manifest", "checkpoint_dir", "speaker_db_dir", "output_dir", "protected_manifest")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    checkpoint_dir: str | None = None
    speaker_db_dir: str | None = None
    output_dir: str | None = None
    protected_manifest: str | None = None
    split: str | None = None
    mode: str = "untargeted"
    epsilon: float = 8 / 255
    iterations: int = 500
    alpha: float = 500.0
    beta: float = 5e-3
    l2_coeff: float = 1.0
    step_rule: str = "pgd-accumulate"
    step_size: float | None = None
    seed: int = 0
    jobs: int = 1
    epochs: int | None = None  # training override for quick runs
    kinds: str = ",".join(KINDS)
    plots: bool = False

    def protection(self) -> ProtectionConfig:
        return ProtectionConfig(self.mode, self.epsilon, self.iterations,
                                LossWeights(self.alpha, self.beta, self.l2_coeff),
                                self.step_rule, self.step_size, self.seed)

    def kind_list(self) -> list[str]:
        kinds = [k.strip() for k in self.kinds.split(",") if k.strip()]
        unknown = [k for k in kinds if k != "none" and k not in KINDS and k != "mp3"]
        if unknown:
            raise ConfigError(f"unknown kinds {unknown}")
        return kinds

    def require(self, *keys, created=("output_dir",)):
        """Keys must be set; inputs must exist, ``created`` ones are made by the command."""
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"{key} is required")
            if key not in created and not Path(value).exists():
                raise ConfigError(f"{key}: {value} does not exist")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _convert(name: str, raw):
    if raw is None:
        return None
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if "bool" in ftype:
            return raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
        if "int" in ftype:
            return int(raw)
        if "float" in ftype:
            return None if str(raw).lower() == "none" else float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return str(raw)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config {path} does not exist")
        parser = configparser.ConfigParser()
        parser.read(path)
        if "run" not in parser:
            raise ConfigError(f"{path}: missing [run] section")
        known = {f.name for f in fields(RunConfig)}
        unknown = set(parser["run"]) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        values = dict(parser["run"])
        base = path.parent
        for key in PATH_KEYS:
            if values.get(key):
                values[key] = str((base / values[key]).resolve()) if not Path(values[key]).is_absolute() \
                    else values[key]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig(**{k: _convert(k, v) for k, v in values.items()})
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.step_rule not in STEP_RULES:
        raise ConfigError(f"step_rule must be one of {STEP_RULES}")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def _atomic_write(path: Path, writer):
    """Write via a temp file in the same directory, then rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path: Path, text: str):
    _atomic_write(path, lambda p: p.write_text(text))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# corpus ----------------------------------------------------------------------

def cmd_corpus(args) -> int:
    corpus = make_fixtures(args.speakers, args.per_speaker, args.heldout, args.seed)
    manifest = write_corpus(corpus, args.output)
    print(f"wrote {len(corpus)} utterances from {len(corpus.speakers)} speakers to {manifest}")
    return EXIT_OK


# train -----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    cfg.require("manifest", "checkpoint_dir", created=("checkpoint_dir",))
    corpus = load_corpus(cfg.manifest)
    stack = train_stack(corpus, cfg.seed, cfg.epochs)
    paths = stack.save(cfg.checkpoint_dir)
    for e, p in zip(stack.encoders + [stack.verifier], paths):
        print(f"{p.stem}: final_loss={e.final_loss_!r} train_accuracy={e.train_accuracy_!r}")
    print(f"{paths[-1].stem}: final_loss={stack.asr.final_loss_!r} train_wer={stack.asr.train_wer_!r}")
    if cfg.speaker_db_dir:
        train = corpus.split("train") or list(corpus)
        db = SpeakerDatabase.build([(r.speaker_id, r.waveform, r.transcript) for r in train],
                                   stack.encoders, stack.mfcc)
        db.save(cfg.speaker_db_dir)
        print(f"speaker database: {len(db)} records in {cfg.speaker_db_dir}")
    return EXIT_OK


# protect ---------------------------------------------------------------------

_WORKER = {}


def _init_worker(cfg_dict):
    import torch

    torch.set_num_threads(1)
    cfg = RunConfig(**cfg_dict)
    stack = SurrogateStack.load(cfg.checkpoint_dir, cfg.seed)
    db = SpeakerDatabase.load(cfg.speaker_db_dir) if cfg.mode == "targeted" else None
    _WORKER.update(cfg=cfg, stack=stack, db=db)


def _protect_one(job):
    index, row = job
    cfg, stack, db = _WORKER["cfg"], _WORKER["stack"], _WORKER["db"]
    out = Path(cfg.output_dir)
    stem = f"{index:05d}_{Path(row['path']).stem}"
    try:
        x = to_canonical(load_wav(row["source"]))
        result = protect(x, cfg.protection(), stack.encoders, stack.asr, db, stack.mfcc, index)
        if not PerturbationBudget(cfg.epsilon).contains(x, result.x_prime):
            raise RuntimeError("protected audio violates the budget")
        record = {"source": row["source"], "transcript": row["transcript"],
                  "speaker_id": row["speaker_id"], "index": index,
                  "config": config_dict(cfg.protection()), **result.to_record(include_runtime=False)}
        _atomic_write(out / "wav" / f"{stem}.wav", lambda p: save_wav(result.x_prime, p))
        _write_text(out / "records" / f"{stem}.json", _json(record))
        log.info("%s: %.1fs, best iteration %d", stem, result.runtime, result.best_iteration)
        return index, f"wav/{stem}.wav", None
    except Exception as exc:  # one bad utterance must not stop the run
        log.error("%s failed: %s", stem, exc)
        return index, None, f"{type(exc).__name__}: {exc}"


def cmd_protect(cfg: RunConfig) -> int:
    cfg.require("manifest", "checkpoint_dir", "output_dir")
    if cfg.mode == "targeted":
        cfg.require("speaker_db_dir")
    cfg.protection()  # validate before loading anything
    manifest = Path(cfg.manifest)
    rows = read_manifest(manifest)
    if cfg.split:
        rows = [r for r in rows if (r.get("split") or "train") == cfg.split]
    for r in rows:
        src = Path(r["path"])
        r["source"] = str(src if src.is_absolute() else manifest.parent / src)
    SurrogateStack.load(cfg.checkpoint_dir)  # fail fast on missing checkpoints
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = list(enumerate(rows))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(cfg.to_dict(),)) as pool:
            results = list(pool.map(_protect_one, jobs))
    else:
        if jobs:
            _init_worker(cfg.to_dict())
        results = [_protect_one(j) for j in jobs]

    failures = {row["source"]: err for (_, _, err), (_, row) in zip(results, jobs) if err}
    lines = [["path", "transcript", "speaker_id", "source"]]
    for (i, rel, _), (_, row) in zip(results, jobs):
        if rel:
            lines.append([rel, row["transcript"], row["speaker_id"], row["source"]])

    def _write_manifest(p):
        with open(p, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(lines)

    _atomic_write(out / "manifest.csv", _write_manifest)
    _write_text(out / "run.json", _json({"config": cfg.to_dict(), "seed": cfg.seed,
                                         "n_protected": len(lines) - 1, "failures": failures}))
    print(f"protected {len(lines) - 1}/{len(rows)} utterances into {out}")
    return EXIT_RUNTIME if failures else EXIT_OK


# evaluate / report -----------------------------------------------------------

def _plot_battery(reports, directory: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in reports if not r.skipped]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    labels = [r.label for r in rows]
    axes[0].bar(labels, [r.wer for r in rows])
    axes[0].set_ylabel("WER (%)")
    axes[1].bar(labels, [r.sim for r in rows])
    axes[1].set_ylabel("SIM")
    for ax in axes:
        ax.tick_params(axis="x", rotation=60)
    fig.tight_layout()
    path = directory / "battery.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _plot_traces(records_dir: Path, directory: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for path in sorted(records_dir.glob("*.json")):
        trace = json.loads(path.read_text())["loss_trace"]
        ax.plot([t["total"] for t in trace], lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    fig.tight_layout()
    out = directory / "loss_traces.png"
    fig.savefig(out, metadata={"Software": None})
    plt.close(fig)
    return out


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.require("manifest", "checkpoint_dir", "output_dir")
    protected_manifest = Path(cfg.protected_manifest or Path(cfg.output_dir) / "manifest.csv")
    if not protected_manifest.exists():
        raise ConfigError(f"protected manifest {protected_manifest} does not exist")
    kinds = cfg.kind_list()
    rows = read_manifest(protected_manifest)
    clean, protected, refs = [], [], []
    for r in rows:
        if not r.get("source"):
            raise ConfigError(f"{protected_manifest}: rows need a source column")
        src = Path(r["source"])
        if not src.exists():
            raise ConfigError(f"clean source {src} is missing")
        clean.append(to_canonical(load_wav(src)))
        protected.append(to_canonical(load_wav(protected_manifest.parent / r["path"])))
        refs.append(r["transcript"])
    if not rows:
        raise ConfigError("protected manifest is empty")
    stack = SurrogateStack.load(cfg.checkpoint_dir, cfg.seed)
    reports = run_battery(clean, protected, refs, stack.asr, stack.verifier,
                          kinds=[k for k in kinds if k != "none"])
    out = Path(cfg.output_dir) / "reports"
    csv_path, json_path = write_reports(reports, out, extra={"seed": cfg.seed, "kinds": kinds})
    if cfg.plots:
        _plot_battery(reports, out)
        records = protected_manifest.parent / "records"
        if records.exists():
            _plot_traces(records, out)
    sys.stdout.write(reports_csv(reports))
    print(f"reports: {csv_path} {json_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"{src} does not exist")
    reports = read_reports(src)
    text = reports_csv(reports)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / f"{src.stem}.csv", text)
        if args.plots:
            _plot_battery(reports, out)
    sys.stdout.write(text)
    return EXIT_OK


# single-file tools ------------------------------------------------------------

def _parse_params(pairs) -> dict:
    params = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--param expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    return params


def cmd_augment(args) -> int:
    w = load_wav(args.input)
    y = augment(w, args.kind, _parse_params(args.param))
    _atomic_write(Path(args.output), lambda p: save_wav(y, p))
    print(f"{args.kind}: {args.input} -> {args.output}")
    return EXIT_OK


def cmd_threshold(args) -> int:
    thresh = masking_threshold(to_canonical(load_wav(args.input)))

    def _write(p):
        np.savetxt(p, thresh.theta, delimiter=",", fmt="%.6f")

    _atomic_write(Path(args.output), _write)
    print(f"theta {thresh.theta.shape[0]}x{thresh.theta.shape[1]} -> {args.output}")
    return EXIT_OK


# parser ------------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--speaker-db-dir")
    p.add_argument("--output-dir")
    p.add_argument("--protected-manifest")
    p.add_argument("--split")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--l2-coeff", type=float)
    p.add_argument("--step-rule", choices=STEP_RULES)
    p.add_argument("--step-size", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--kinds", help="comma-separated battery kinds")
    p.add_argument("--plots", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voiceshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="synthesise the fixtures corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--speakers", type=int, default=6)
    p.add_argument("--per-speaker", type=int, default=30)
    p.add_argument("--heldout", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    for name, text in (("train", "train the surrogate stack"), ("protect", "protect a manifest"),
                       ("evaluate", "run the robustness battery")):
        _run_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("augment", help="apply one battery transform to a WAV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--param", action="append", help="key=value (JSON value)")

    p = sub.add_parser("report", help="re-render a report from its JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("threshold", help="dump the masking threshold (frames x bins) as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    return parser


RUN_COMMANDS = {"train": cmd_train, "protect": cmd_protect, "evaluate": cmd_evaluate}
FILE_COMMANDS = {"corpus": cmd_corpus, "augment": cmd_augment, "report": cmd_report,
                 "threshold": cmd_threshold}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in RUN_COMMANDS:
            overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
            cfg = load_config(args.config, overrides)
            return RUN_COMMANDS[args.command](cfg)
        return FILE_COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
