"""Command line front end.

Four subcommands cover the whole workflow:

* ``gen-data``  render the synthetic corpus and cache its features
* ``train``     fit one of the four training modes, repeated over seeds
* ``eval``      score a finished run on a chosen split
* ``report``    aggregate several evaluated runs into tables

Everything lives under one output root, resolved in order from an explicit
``--output-dir`` (or ``output_dir`` override), the ``GUIDED_SED_OUT``
environment variable, and the config's ``output_dir``. The corpus sits in
``<root>/corpus`` and every training run gets its own self-describing
directory: ``config.txt`` holds the full flat configuration, ``run.json``
the mode label and config hash, ``epoch_log.jsonl`` one line per epoch,
and ``checkpoints/`` one directory per model role.

Any configuration key can be overridden on the command line, either as a
flag of the same dotted name (``--train.gamma 0.997``) or via repeatable
``--set train.gamma=0.997`` assignments; later assignments win. Exit
codes: 0 success, 2 usage or configuration error, 3 validation failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import nets
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    dump_config,
    flatten_config,
    load_config_file,
)
from .corpus import (
    SPLITS,
    CorpusSpec,
    FeatureStore,
    load_manifest,
    generate_synthetic_corpus,
    split_records,
    validation_split,
)
from .errors import (
    ConfigError,
    DivergenceError,
    GuidedSedError,
    InputError,
    SamplingError,
    ValidationError,
)
from .metrics import MetricsReport, aggregate_runs, event_based_macro_f1, tagging_macro_f1
from .postprocess import derive_windows, smooth_and_decode, write_events_jsonl, write_events_tsv
from .trainer import TrainingData, train_guided, train_mean_teacher, train_weak_only

MODES = ("guided", "weak_only_pt", "weak_only_ps", "mean_teacher")
OUT_ENV_VAR = "GUIDED_SED_OUT"
CORPUS_DIR_NAME = "corpus"

_CONFIG_KEYS = sorted(flatten_config(ExperimentConfig()))
_CORPUS_ARTIFACTS = ("audio", "features", "manifest.jsonl", "truth_sidecar.jsonl", "corpus_meta.json")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _collect_overrides(args) -> list:
    """Merge --set assignments, dotted flags, and per-command aliases."""
    overrides = list(getattr(args, "set", None) or [])
    for key in _CONFIG_KEYS:
        value = getattr(args, f"cfg::{key}", None)
        if value is not None:
            overrides.append(f"{key}={value}")
    for attr, key in getattr(args, "alias_map", {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return overrides


def _load_cli_config(args, overrides) -> ExperimentConfig:
    config = ExperimentConfig()
    if getattr(args, "config", None):
        config = load_config_file(args.config, base=config)
    config = apply_overrides(config, overrides)
    config.validate()
    return config


def _resolve_root(overrides, config: ExperimentConfig) -> Path:
    """Output root: explicit output_dir override beats $GUIDED_SED_OUT beats config."""
    explicit = any(o.split("=", 1)[0].strip() == "output_dir" for o in overrides)
    if explicit:
        return Path(config.output_dir)
    env = os.environ.get(OUT_ENV_VAR)
    return Path(env) if env else Path(config.output_dir)


def _resolve_run_dir(raw: str) -> Path:
    """A run directory given as a path, or as a name under the output root."""
    candidate = Path(raw)
    if (candidate / "config.txt").exists():
        return candidate
    env = os.environ.get(OUT_ENV_VAR)
    if env and (Path(env) / raw / "config.txt").exists():
        return Path(env) / raw
    raise InputError(f"no run directory at {raw} (missing config.txt)")


def _write_run_config(config: ExperimentConfig, path: Path) -> None:
    path.write_text(f"# config_hash={config_hash(config)}\n" + dump_config(config))


def _read_corpus_meta(data_dir: Path) -> dict:
    meta_path = data_dir / "corpus_meta.json"
    if not meta_path.exists():
        raise InputError(f"no corpus at {data_dir} (missing corpus_meta.json); run gen-data first")
    return json.loads(meta_path.read_text())


def _spec_from_meta(meta: dict) -> CorpusSpec:
    raw = dict(meta["spec"])
    raw["event_duration_range"] = tuple(raw["event_duration_range"])
    raw["snr_range"] = tuple(raw["snr_range"])
    return CorpusSpec(**raw)


def _run_label(mode: str, gamma: float) -> str:
    return f"guided-g{gamma!r}" if mode == "guided" else mode


def _run_name(mode: str, gamma: float, seed: int) -> str:
    return f"{_run_label(mode, gamma)}-s{seed}"


def _forward_batched(model: nets.SedModel, x: np.ndarray, batch_size: int = 32):
    """Clip and frame probabilities over an array, as numpy."""
    model.eval()
    clip_parts, frame_parts = [], []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out = model(torch.from_numpy(x[start : start + batch_size]))
            clip_parts.append(out.clip_probs.numpy())
            frame_parts.append(out.frame_probs.numpy())
    return np.concatenate(clip_parts), np.concatenate(frame_parts)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = _collect_overrides(args)
    config = _load_cli_config(args, overrides)
    out_dir = _resolve_root(overrides, config) / CORPUS_DIR_NAME
    meta_path = out_dir / "corpus_meta.json"
    if meta_path.exists():
        existing = json.loads(meta_path.read_text())["fingerprint"]
        if existing == config.corpus.fingerprint() and not args.force:
            print(f"corpus {existing} already present at {out_dir}, nothing to do")
            return 0
        if not args.force:
            raise ValidationError(
                f"{out_dir} holds a different corpus ({existing}); pass --force to regenerate"
            )
        for name in _CORPUS_ARTIFACTS:
            target = out_dir / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    records = generate_synthetic_corpus(config.corpus, out_dir)
    store = FeatureStore(out_dir, config.features)
    store.ensure_cached(records)
    print(
        f"wrote {len(records)} clips ({config.corpus.n_weak} weak, "
        f"{config.corpus.n_unlabeled} unlabeled, {config.corpus.n_test} test) "
        f"to {out_dir}, fingerprint {config.corpus.fingerprint()}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_training_data(
    data_dir: Path, config: ExperimentConfig, need_unlabeled: bool
) -> TrainingData:
    records = load_manifest(data_dir / "manifest.jsonl")
    weak = split_records(records, "weak")
    if not weak:
        raise InputError(f"{data_dir}: corpus has no weak split to train on")
    train_weak, held_out = validation_split(weak, fraction=0.1)
    store = FeatureStore(data_dir, config.features)
    n_classes = config.corpus.n_classes

    def tags_of(rs):
        return np.stack([r.tag_vector(n_classes) for r in rs])

    unlabeled_x = None
    if need_unlabeled:
        unlabeled = split_records(records, "unlabeled")
        if unlabeled:
            unlabeled_x = store.load_stack(unlabeled)
    data = TrainingData(
        weak_x=store.load_stack(train_weak),
        weak_y=tags_of(train_weak),
        unlabeled_x=unlabeled_x,
        val_x=store.load_stack(held_out) if held_out else None,
        val_y=tags_of(held_out) if held_out else None,
    )
    data.validate()
    return data


def _train_one(mode: str, config: ExperimentConfig, data: TrainingData, run_dir: Path) -> dict:
    """Train a single run into run_dir; returns final validation scores."""
    n_classes = config.corpus.n_classes
    n_mels = config.features.n_mels
    seed = config.train.seed
    checkpoint_dir = run_dir / "checkpoints"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)

    models = {}

    def keep_epoch(log):
        # Retain a snapshot per epoch so post-hoc model selection over the
        # run stays possible; the final weights land in checkpoints/<role>.
        for role, model in models.items():
            nets.save_checkpoint(model, checkpoint_dir / f"epoch-{log.epoch:03d}" / role)

    if mode == "guided":
        models["pt"] = nets.build_model(nets.pt_spec(n_classes, n_mels, config.pt_width), seed * 2)
        models["ps"] = nets.build_model(
            nets.ps_spec(n_classes, n_mels, config.ps_width), seed * 2 + 1
        )
        logs = train_guided(models["pt"], models["ps"], data, config.train, on_epoch=keep_epoch)
    elif mode == "weak_only_pt":
        models["pt"] = nets.build_model(nets.pt_spec(n_classes, n_mels, config.pt_width), seed * 2)
        logs = train_weak_only(models["pt"], data, config.train, on_epoch=keep_epoch)
    elif mode == "weak_only_ps":
        models["ps"] = nets.build_model(
            nets.ps_spec(n_classes, n_mels, config.ps_width), seed * 2 + 1
        )
        logs = train_weak_only(models["ps"], data, config.train, on_epoch=keep_epoch)
    elif mode == "mean_teacher":
        student = nets.build_model(nets.ps_spec(n_classes, n_mels, config.ps_width), seed * 2 + 1)
        models["ps"] = student
        teacher, logs = train_mean_teacher(student, data, config.train, on_epoch=keep_epoch)
        models["teacher"] = teacher
    else:
        raise ConfigError(f"unknown training mode {mode!r}")

    for role, model in models.items():
        nets.save_checkpoint(model, checkpoint_dir / role)
    with open(run_dir / "epoch_log.jsonl", "w") as fh:
        fh.write(json.dumps({"config_hash": config_hash(config)}) + "\n")
        for log in logs:
            fh.write(log.to_json() + "\n")
    return logs[-1].val_tagging_f1 if logs else {}


def cmd_train(args) -> int:
    overrides = _collect_overrides(args)
    config = _load_cli_config(args, overrides)
    root = _resolve_root(overrides, config)
    data_dir = Path(args.data) if args.data else root / CORPUS_DIR_NAME
    meta = _read_corpus_meta(data_dir)
    config = replace(config, corpus=_spec_from_meta(meta), output_dir=str(root))
    config.validate()

    need_unlabeled = args.mode in ("guided", "mean_teacher")
    data = _load_training_data(data_dir, config, need_unlabeled)

    for repeat in range(config.repeats):
        seed = config.train.seed + repeat
        run_config = replace(config, train=replace(config.train, seed=seed))
        run_dir = root / _run_name(args.mode, run_config.train.gamma, seed)
        if (run_dir / "config.txt").exists():
            if not args.force:
                raise ValidationError(f"run directory {run_dir} exists; pass --force to redo it")
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_run_config(run_config, run_dir / "config.txt")
        (run_dir / "run.json").write_text(
            json.dumps(
                {
                    "mode": args.mode,
                    "label": _run_label(args.mode, run_config.train.gamma),
                    "seed": seed,
                    "config_hash": config_hash(run_config),
                },
                sort_keys=True,
            )
            + "\n"
        )
        val_scores = _train_one(args.mode, run_config, data, run_dir)
        summary = " ".join(f"val_{k}={v:.3f}" for k, v in sorted(val_scores.items()))
        print(f"{run_dir.name}: {run_config.train.epochs} epochs done {summary}".rstrip())
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _resolve_smoothing(smoothing, truth_records, n_classes: int, hop_seconds: float):
    """Fill in per-class median windows when the adaptive rule asks for them.

    Explicit windows always win. The adaptive rule measures each class's
    median event duration on the weak split (the statistics the corpus
    exposes for calibration) and takes the configured fraction of it.
    """
    if smoothing.windows is not None or smoothing.derivation_rule != "duration_adaptive":
        return smoothing
    durations: list[list[float]] = [[] for _ in range(n_classes)]
    for record in split_records(truth_records, "weak"):
        for event in record.events:
            durations[event.class_id].append(event.duration)
    medians = [float(np.median(d)) if d else None for d in durations]
    windows = derive_windows(
        medians,
        hop_seconds,
        fraction=smoothing.duration_fraction,
        fallback=smoothing.default_window,
    )
    return replace(smoothing, windows=windows)


def cmd_eval(args) -> int:
    run_dir = _resolve_run_dir(args.run)
    config = load_config_file(run_dir / "config.txt")
    config = apply_overrides(config, _collect_overrides(args))
    config.validate()

    data_dir = Path(args.data) if args.data else Path(config.output_dir) / CORPUS_DIR_NAME
    meta = _read_corpus_meta(data_dir)
    if meta["fingerprint"] != config.corpus.fingerprint():
        raise ValidationError(
            f"run {run_dir.name} was trained on corpus {config.corpus.fingerprint()}, "
            f"but {data_dir} holds {meta['fingerprint']}"
        )
    truth_records = load_manifest(data_dir / "truth_sidecar.jsonl", sidecar=True)
    subset = split_records(truth_records, args.split)
    if not subset:
        raise InputError(f"{data_dir}: corpus has no clips in the {args.split!r} split")

    checkpoint_dir = run_dir / "checkpoints"
    if not checkpoint_dir.is_dir():
        raise InputError(f"{run_dir} has no checkpoints; train first")
    models = {
        path.name: nets.load_checkpoint(path)
        for path in sorted(checkpoint_dir.iterdir())
        if path.is_dir()
    }
    if not models:
        raise InputError(f"{checkpoint_dir} is empty")

    store = FeatureStore(data_dir, config.features)
    x = store.load_stack(subset)
    hop_seconds = store.hop_seconds(subset[0])
    n_classes = config.corpus.n_classes
    truth_tags = np.stack([r.tag_vector(n_classes) for r in subset]).astype(int)
    truth_events = {r.clip_id: list(r.events) for r in subset}

    scores = {}
    detector_frames = None
    detector_clips = None
    detector_role = None
    for role in sorted(models):
        clip_probs, frame_probs = _forward_batched(models[role], x)
        predictions = (clip_probs >= config.train.tag_threshold).astype(int)
        scores[f"{role}_tagging_f1"] = tagging_macro_f1(predictions, truth_tags)
        if role in ("ps", "pt") and (detector_role is None or role == "ps"):
            detector_role, detector_frames, detector_clips = role, frame_probs, clip_probs

    if detector_role is None:
        raise InputError(f"{checkpoint_dir} holds no detector model (need a pt or ps checkpoint)")
    stride = models[detector_role].spec.temporal_compression
    if stride > 1:
        detector_frames = nets.restore_frames(detector_frames, x.shape[1], stride)
    smoothing = _resolve_smoothing(config.smoothing, truth_records, n_classes, hop_seconds)
    hypotheses = {
        record.clip_id: smooth_and_decode(
            detector_frames[i],
            smoothing,
            hop_seconds,
            clip_probs=detector_clips[i],
            clip_threshold=config.train.tag_threshold,
        )
        for i, record in enumerate(subset)
    }
    macro, totals = event_based_macro_f1(truth_events, hypotheses, n_classes, config.collars)
    scores["event_f1"] = macro

    class_names = meta["class_names"]
    report = MetricsReport(
        n_clips=len(subset),
        scores=scores,
        per_class={
            class_names[c]: {"f1": t.f1, "tp": t.tp, "fp": t.fp, "fn": t.fn}
            for c, t in enumerate(totals)
        },
    )
    digest = config_hash(config)
    payload = json.loads(report.to_json())
    payload["config_hash"] = digest
    suffix = "" if args.split == "test" else f"-{args.split}"
    (run_dir / f"metrics{suffix}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    write_events_jsonl(
        hypotheses, run_dir / f"events{suffix}.jsonl", header={"config_hash": digest}
    )
    write_events_tsv(
        hypotheses, class_names, run_dir / f"events{suffix}.tsv", comment=f"config_hash={digest}"
    )
    print(
        f"{run_dir.name} [{args.split}]: "
        + " ".join(f"{key}={value:.4f}" for key, value in sorted(scores.items()))
    )
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _load_run_results(run_dirs) -> list:
    results = []
    for raw in run_dirs:
        run_dir = _resolve_run_dir(str(raw))
        metrics_path = run_dir / "metrics.json"
        if not metrics_path.exists():
            raise InputError(f"{run_dir} has no metrics.json; run eval first")
        run_meta_path = run_dir / "run.json"
        if not run_meta_path.exists():
            raise InputError(f"{run_dir} has no run.json; is this a run directory?")
        run_meta = json.loads(run_meta_path.read_text())
        config = load_config_file(run_dir / "config.txt")
        results.append(
            {
                "dir": run_dir,
                "label": run_meta["label"],
                "seed": run_meta["seed"],
                "fingerprint": config.corpus.fingerprint(),
                "scores": MetricsReport.from_json(metrics_path.read_text()).scores,
            }
        )
    fingerprints = {r["fingerprint"] for r in results}
    if len(fingerprints) > 1:
        raise ValidationError(
            f"refusing to mix corpora: found fingerprints {sorted(fingerprints)}"
        )
    return results


def _aligned_table(header, rows) -> str:
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in [header, ["-" * w for w in widths], *rows]]
    return "\n".join(lines)


def cmd_report(args) -> int:
    results = _load_run_results(args.runs)
    out_dir = Path(args.output_dir) if args.output_dir else results[0]["dir"].parent
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = f"corpus={results[0]['fingerprint']} runs={len(results)}"

    by_label: dict = {}
    for result in results:
        by_label.setdefault(result["label"], []).append(result)
    metric_names = sorted({name for r in results for name in r["scores"]})

    aggregate_rows = []
    csv_lines = [f"# {provenance}", "label,metric,mean,stderr,n_runs"]
    for label in sorted(by_label):
        group = by_label[label]
        cells = [label, str(len(group))]
        for name in metric_names:
            values = [r["scores"][name] for r in group if name in r["scores"]]
            if values:
                mean, stderr = aggregate_runs(values)
                cells.append(f"{mean:.4f} +/- {stderr:.4f}")
                csv_lines.append(f"{label},{name},{mean:.6f},{stderr:.6f},{len(values)}")
            else:
                cells.append("-")
        aggregate_rows.append(cells)

    best_rows = []
    best_csv = [f"# {provenance}", "label,run,seed,event_f1"]
    for label in sorted(by_label):
        scored = [r for r in by_label[label] if "event_f1" in r["scores"]]
        if not scored:
            continue
        best = max(scored, key=lambda r: r["scores"]["event_f1"])
        best_rows.append([label, best["dir"].name, str(best["seed"]),
                          f"{best['scores']['event_f1']:.4f}"])
        best_csv.append(
            f"{label},{best['dir'].name},{best['seed']},{best['scores']['event_f1']:.6f}"
        )

    text = (
        f"# {provenance}\n"
        "Mean over seeds (+/- standard error)\n"
        + _aligned_table(["label", "runs", *metric_names], aggregate_rows)
        + "\n\nBest single run by event F1\n"
        + _aligned_table(["label", "run", "seed", "event_f1"], best_rows)
        + "\n"
    )
    (out_dir / "report.txt").write_text(text)
    (out_dir / "aggregate.csv").write_text("\n".join(csv_lines) + "\n")
    (out_dir / "best.csv").write_text("\n".join(best_csv) + "\n")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def _add_config_options(parser, aliases: dict, with_config_file: bool = True) -> None:
    if with_config_file:
        parser.add_argument("--config", help="config file of key=value lines")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (dotted, e.g. train.gamma=0.99); repeatable",
    )
    group = parser.add_argument_group(
        "config overrides",
        "every config key is also a flag of the same dotted name, "
        "e.g. --train.gamma 0.997 or --corpus.n_weak 100 (see README for the full list)",
    )
    for key in _CONFIG_KEYS:
        option_strings = [f"--{key}"]
        if "." not in key and "_" in key:
            option_strings.append(f"--{key.replace('_', '-')}")
        group.add_argument(
            *option_strings, dest=f"cfg::{key}", metavar="VALUE", help=argparse.SUPPRESS
        )
    alias_map = {}
    for flag, (target, help_text) in aliases.items():
        attr = f"alias_{flag.lstrip('-').replace('-', '_')}"
        parser.add_argument(flag, dest=attr, metavar="VALUE", help=help_text)
        alias_map[attr] = target
    parser.set_defaults(alias_map=alias_map)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guided-sed",
        description="Teacher-student sound event detection on synthetic audio.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="render the synthetic corpus and cache features")
    _add_config_options(p, {"--seed": ("corpus.seed", "corpus random seed")})
    p.add_argument("--force", action="store_true", help="replace an existing corpus")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train one mode, repeated over seeds")
    _add_config_options(
        p,
        {
            "--seed": ("train.seed", "first training seed (repeats count up from it)"),
            "--gamma": ("train.gamma", "ramp factor for the reverse pseudo-tag loss"),
        },
    )
    p.add_argument("--data", help="corpus directory (default <output root>/corpus)")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--force", action="store_true", help="redo existing run directories")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a trained run")
    _add_config_options(p, {}, with_config_file=False)
    p.add_argument("--run", required=True, help="run directory (path, or name under the root)")
    p.add_argument("--data", help="corpus directory (default: the run's recorded root)")
    p.add_argument("--split", default="test", choices=SPLITS, help="split to score")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("report", help="aggregate evaluated runs into tables")
    p.add_argument("runs", nargs="+", help="run directories with metrics.json")
    p.add_argument(
        "--output_dir", "--output-dir",
        help="where to write report files (default: first run's parent)",
    )
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 2
    try:
        return args.handler(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 4
    except (ValidationError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GuidedSedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
