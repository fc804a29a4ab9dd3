"""Command-line entry point.

Subcommands: ``generate`` (write a synthetic dataset), ``pretrain`` (train a
source-modality network on a dataset), ``transfer`` (run the full strategy
comparison grid), ``project`` (export 2-D feature coordinates per modality)
and ``metrics`` (recompute summary statistics from a metrics CSV).

Exit codes: 0 success, 2 configuration error, 3 runtime error. A JSON
config file supplies ``ExperimentConfig`` fields; command-line flags win
over file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_params, save_params
from .data import ModalityEmitter, StageMarkov, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, XferlabError
from .harness import (ExperimentConfig, read_metrics_csv, run_experiment, write_summary_csv,
                      write_training_log)
from .metrics import project_features_2d
from .models import build_model, load_arrays
from .transfer import epoch_feature_map, modality_pool, prepare_recording, run_pretrain


def _load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def cmd_generate(args) -> int:
    markov = StageMarkov(epochs_per_recording=args.epochs)
    emitter = ModalityEmitter.default_mismatch(sigma=args.sigma)
    ds = generate_dataset(markov, emitter, args.recordings, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} recordings to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config, {"dataset_dir": args.data})
    ds = load_dataset(args.data)
    if len(ds) <= args.val_recordings:
        raise ConfigError(f"dataset has {len(ds)} recordings, need more than {args.val_recordings}")
    prepared = [prepare_recording(rec) for rec in ds.recordings]
    train, val = prepared[: -args.val_recordings], prepared[-args.val_recordings:]
    model = build_model(args.arch, cfg.model_config())
    result = run_pretrain(model, cfg.plan("scratch", args.seed),
                          modality_pool(model, train, "source"), val, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out / "checkpoint.ckpt")
    write_training_log(out / "log.csv", result.log)
    print(f"best validation accuracy {result.best_val:.4f} at step {result.best_step}; "
          f"checkpoint in {out}")
    return 0


def cmd_transfer(args) -> int:
    overrides = {"out_dir": args.out, "dataset_dir": args.data, "jobs": args.jobs}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    cfg = _load_config(args.config, overrides)
    rows = run_experiment(cfg)
    print(f"wrote {len(rows)} metric rows to {Path(cfg.out_dir) / 'metrics.csv'}")
    return 0


def cmd_project(args) -> int:
    cfg = _load_config(args.config, {})
    model = build_model(args.arch, cfg.model_config())
    arrays = load_params(args.checkpoint)
    params = model.init_params(np.random.default_rng(0))
    try:
        load_arrays(params, arrays)
    except XferlabError as exc:
        raise ConfigError(f"checkpoint does not match architecture '{args.arch}': {exc}") from exc
    ds = load_dataset(args.data)
    prepared = [prepare_recording(rec) for rec in ds.recordings]

    rows = []
    feats = []
    for rec in prepared:
        for modality in ("source", "target"):
            arr = rec.source if modality == "source" else rec.target
            fmap = epoch_feature_map(model, params, arr)
            for i in range(len(arr)):
                rows.append([rec.rec_id, i, modality, int(rec.labels[i])])
                feats.append(fmap[i])
    coords = project_features_2d(np.asarray(feats))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["recording", "epoch", "modality", "stage", "x", "y"])
        for row, (x, y) in zip(rows, coords):
            w.writerow(row + [f"{x:.6f}", f"{y:.6f}"])
    print(f"wrote {len(rows)} projected feature rows to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    rows = read_metrics_csv(args.input)
    write_summary_csv(args.out, rows)
    print(f"wrote summary for {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xferlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic paired-modality dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--recordings", type=int, default=14)
    g.add_argument("--epochs", type=int, default=48, help="epochs per recording")
    g.add_argument("--sigma", type=float, default=1.0, help="sensor noise level")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("pretrain", help="train a source-modality network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--arch", default="arnn", choices=("arnn", "seqsleepnet"))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-recordings", type=int, default=2)
    t.add_argument("--config")
    t.set_defaults(fn=cmd_pretrain)

    r = sub.add_parser("transfer", help="run the strategy comparison grid")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--data")
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int)
    r.set_defaults(fn=cmd_transfer)

    j = sub.add_parser("project", help="export 2-D feature coordinates")
    j.add_argument("--checkpoint", required=True)
    j.add_argument("--data", required=True)
    j.add_argument("--out", required=True)
    j.add_argument("--arch", default="arnn", choices=("arnn", "seqsleepnet"))
    j.add_argument("--config")
    j.set_defaults(fn=cmd_project)

    m = sub.add_parser("metrics", help="summarize a metrics CSV")
    m.add_argument("--input", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (XferlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
