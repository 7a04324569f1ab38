"""Command-line entry point: generate-data, pretrain, eval-pretext, probe, reconstruct."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import load_checkpoint, parameter_hash
from .config import encoder_config, parse_flags, resolve_config, train_config
from .data import NormalizationStats, load_split
from .errors import ConfigError, DataError, GaitSSLError
from .evaluation import (
    channel_regression_task,
    eval_pretext,
    metadata_label_task,
    pretext_masks,
    reconstruct_masked,
    run_probe,
)
from .pipeline import PreparedData, prepare, trial_dir
from .synth import CohortSpec, cohort_sanity, generate_cohort, write_cohort
from .training import build_model, fit

log = logging.getLogger("gaitssl")


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def data_fingerprint(data_dir) -> str:
    h = hashlib.sha256()
    for p in sorted(trial_dir(data_dir).glob("*.csv")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_json(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _write_csv(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _split_path(args) -> Path:
    if not Path(args.data).is_dir():
        raise DataError(f"data directory {args.data} does not exist")
    if args.split:
        return Path(args.split)
    p = Path(args.data) / "split.json"
    if not p.exists():
        raise ConfigError("no --split given and the data directory has no split.json")
    return p


# -- commands ---------------------------------------------------------------


def cmd_generate(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read cohort spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = CohortSpec.from_dict(raw)
    cohort = generate_cohort(spec)
    report = cohort_sanity(cohort)
    out = write_cohort(cohort, args.out)
    _write_json({"out": str(out), "subjects": spec.num_subjects, "trials": len(cohort.trials),
                 "peak_fraction": report.peak_fraction,
                 "separability_auc": report.separability_auc})
    return 0


def cmd_pretrain(args, extra) -> int:
    flags = parse_flags(extra)
    if args.seed is not None:
        flags["seed"] = args.seed
    run = resolve_config(args.config, flags)
    split = load_split(_split_path(args))
    prep = prepare(args.data, split, run.get("data.past_len"), run.get("data.future_len"),
                   run.get("data.stride"), run.get("data.target_channels"))
    tcfg = train_config(run)
    ecfg = encoder_config(run, len(prep.input_channels))
    torch.set_num_threads(1)  # deterministic reductions across machines
    model = build_model(ecfg, tcfg.seed)
    extras = {
        "run_config": run.values,
        "normalization": prep.stats.to_dict(),
        "features": list(prep.features),
        "input_channels": prep.input_channels,
        "target_channels": list(prep.target_channels),
    }
    out = Path(args.out)
    result = fit(model, prep.splits["train"], prep.splits["validation"], tcfg,
                 prep.input_channels, out, extras)
    manifest = {
        "version": version_string(),
        "seed": run.get("seed"),
        "config_hash": run.hash(),
        "config": run.values,
        "provenance": run.provenance,
        "data": {"dir": str(args.data), "fingerprint": data_fingerprint(args.data),
                 "split": split.to_dict()},
        "result": {"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch,
                   "best_val_loss": result.best.best_val_loss,
                   "parameter_hash": parameter_hash(result.best.build_model())},
    }
    _write_json(manifest, out / "manifest.json")
    _write_json(manifest["result"])
    return 0


def _load_for_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    ex = ckpt.extras
    if "run_config" not in ex or "normalization" not in ex:
        raise DataError(f"checkpoint {args.ckpt} lacks run configuration or normalizer")
    run = resolve_config(ex["run_config"])
    split = load_split(_split_path(args))
    prep = prepare(args.data, split, run.get("data.past_len"), run.get("data.future_len"),
                   run.get("data.stride"), ex.get("target_channels"),
                   NormalizationStats.from_dict(ex["normalization"]))
    if list(prep.features) != ex.get("features", list(prep.features)):
        raise DataError(f"data features {list(prep.features)} differ from checkpoint "
                        f"features {ex['features']}")
    return ckpt, run, prep


def _held_out(run, prep: PreparedData, which: str | None):
    part = which or run.get("eval.subjects")
    ws = prep.splits[part]
    if len(ws) == 0:
        raise DataError(f"no {part} windows to evaluate")
    return part, ws


def cmd_eval_pretext(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    ckpt, run, prep = _load_for_eval(args)
    part, ws = _held_out(run, prep, args.subjects)
    seed = run.get("eval.seed") if args.seed is None else args.seed
    model = ckpt.build_model()
    report = eval_pretext(model, ws.values[..., prep.input_channels], args.objective,
                          train_config(run), seed)
    report.counts["windows"] = len(ws)
    out = report.to_dict()
    out.update(subjects=part, seed=seed)
    if args.out:
        _write_json(out, Path(args.out) / f"pretext_{args.objective}.json")
    _write_json(out)
    return 0


def _probe_task(name: str, head: str | None, prep: PreparedData):
    if name in prep.features:
        return channel_regression_task(name, prep.features.index(name), head)
    subjects = list(prep.metadata.values())
    if subjects and name in subjects[0]:
        return metadata_label_task(name, head)
    raise ConfigError(f"unknown probe task {name!r}: not a channel or metadata column")


def cmd_probe(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    ckpt, run, prep = _load_for_eval(args)
    part, _ = _held_out(run, prep, args.subjects)
    head = args.head or run.get("probe.head")
    task = _probe_task(args.task, head, prep)
    if task.kind == "regression" and args.task not in prep.target_channels:
        raise ConfigError(f"regression target {args.task!r} must be a target channel "
                          f"{list(prep.target_channels)}, not an encoder input")
    seed = run.get("seed") if args.seed is None else args.seed
    model = ckpt.build_model()
    result = run_probe(model, prep.splits, prep.split, prep.input_channels, prep.metadata, task,
                       seed=seed, eval_on=part, step_stride=run.get("probe.step_stride"),
                       max_epochs=run.get("probe.max_epochs"), lr=run.get("probe.learning_rate"),
                       weight_decay=run.get("probe.weight_decay"),
                       patience=run.get("probe.patience"))
    out = result.report.to_dict()
    out.update(subjects=part, head=task.head, kind=task.kind, seed=seed)
    if args.out:
        _write_json(out, Path(args.out) / f"probe_{args.task}.json")
        _write_csv(result.predictions, Path(args.out) / f"probe_{args.task}_predictions.csv")
    _write_json(out)
    return 0


def cmd_reconstruct(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    ckpt, run, prep = _load_for_eval(args)
    for ws in prep.splits.values():
        ids = ws.window_ids()
        if args.window in ids:
            i = ids.index(args.window)
            break
    else:
        raise DataError(f"window {args.window!r} not found (ids look like subject:trial:start)")
    seed = run.get("eval.seed") if args.seed is None else args.seed
    x = ws.values[i:i + 1, :, prep.input_channels]
    masks = pretext_masks(args.objective, 1, train_config(run), seed)
    pred = reconstruct_masked(ckpt.build_model(), x, masks, args.objective)
    names = [prep.features[c] for c in prep.input_channels]
    rows = [{"time": t, "feature": names[d], "truth": float(x[0, t, d]),
             "prediction": float(pred[0, t, d]), "masked": int(masks[0, t])}
            for t in range(x.shape[1]) for d in range(x.shape[2])]
    if args.out:
        _write_csv(rows, args.out)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitssl", description=__doc__, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"gaitssl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, allow_abbrev=False)
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate, "write a synthetic cohort")
    p.add_argument("--spec", help="JSON cohort spec (defaults when omitted)")
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "pretrain an encoder; extra --section.key VALUE flags "
                                      "override the config")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split JSON (default: <data>/split.json)")
    p.add_argument("--out", required=True)

    for name, func, help in (("eval-pretext", cmd_eval_pretext, "masked-position metrics"),
                             ("probe", cmd_probe, "frozen-encoder probe"),
                             ("reconstruct", cmd_reconstruct, "per-step reconstruction CSV")):
        p = add(name, func, help)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split")
        p.add_argument("--out")
        if name != "reconstruct":
            p.add_argument("--subjects", choices=("validation", "test"))
        if name == "eval-pretext":
            p.add_argument("--objective", choices=("lc", "tc"), required=True)
        elif name == "probe":
            p.add_argument("--task", required=True, help="metadata column or target channel")
            p.add_argument("--head", choices=("linear", "mlp"))
        else:
            p.add_argument("--window", required=True, help="subject:trial:start")
            p.add_argument("--objective", choices=("lc", "tc"), default="lc")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except GaitSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
