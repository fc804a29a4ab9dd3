"""Experiment orchestration: folds, subsets, pretraining, metrics CSVs.

One experiment = a dataset (loaded or generated), a rotation of
validation/test recordings over ``folds`` cross-validation folds, a
10-recording training pool per fold split into nested subsets of 10, 5 and
2 recordings, and every (architecture, strategy, subset, seed) combination
trained and evaluated on the fold's test recordings. Pretraining happens
once per (architecture, fold, seed) and is shared by the strategies that
start from the checkpoint; ``direct`` is evaluated once per
(architecture, fold, seed) and reported with subset size 0.

All randomness derives from named integer tuples via ``SeedSequence``, so
results are byte-identical across runs and across worker counts.
"""

from __future__ import annotations

import csv
import multiprocessing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (ModalityEmitter, StageMarkov, generate_dataset, load_dataset, split_subsets)
from .errors import ConfigError
from .metrics import MetricsReport
from .models import ModelConfig, build_model
from .tensor import Tensor
from .transfer import (STRATEGIES, PreparedRecording, StrategyData, TransferPlan,
                       modality_pool, paired_pool, predict_epochs,
                       prepare_recording, run_pretrain, run_strategy)

ARCHITECTURES = ("arnn", "seqsleepnet")


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/exp"
    dataset_dir: str | None = None

    # generator settings, used when dataset_dir is not given
    n_recordings: int = 14
    epochs_per_recording: int = 48
    sigma: float = 1.0
    data_seed: int = 7

    # protocol
    architectures: tuple = ("arnn",)
    strategies: tuple = STRATEGIES
    subset_sizes: tuple = (10, 5, 2)
    folds: int = 3
    seeds: tuple = (0, 1, 2)
    pool_recordings: int = 10
    val_recordings: int = 2
    test_recordings: int = 2

    # model sizes (desk scale)
    n_filters: int = 16
    hidden: int = 16
    attn_dim: int = 16
    seq_hidden: int = 16
    seq_len: int = 10

    # training plan
    lr: float = 1e-4
    pretrain_epochs: int = 10
    transfer_epochs: int = 20
    val_every: int = 200
    finetune_batch: int = 32
    lambda2: float = 1e-4
    lambda_kl: float = 0.1
    matching: str = "mse"

    jobs: int = 1

    def __post_init__(self):
        self.architectures = tuple(self.architectures)
        self.strategies = tuple(self.strategies)
        self.subset_sizes = tuple(int(s) for s in self.subset_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture '{arch}', expected one of {ARCHITECTURES}")
        for strat in self.strategies:
            if strat not in STRATEGIES:
                raise ConfigError(f"unknown strategy '{strat}', expected one of {STRATEGIES}")
        if self.matching not in ("mse", "mmd"):
            raise ConfigError(f"unknown matching loss '{self.matching}'")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.folds < 1 or self.jobs < 1:
            raise ConfigError("folds and jobs must be >= 1")
        if any(s < 1 or s > self.pool_recordings for s in self.subset_sizes):
            raise ConfigError(f"subset sizes must lie in 1..{self.pool_recordings}")
        per_fold = self.val_recordings + self.test_recordings
        if self.folds * per_fold > self.n_recordings:
            raise ConfigError(
                f"{self.folds} folds x {per_fold} held-out recordings exceed {self.n_recordings} total")
        if self.n_recordings - per_fold < self.pool_recordings:
            raise ConfigError(
                f"need {self.pool_recordings} pool recordings per fold, dataset leaves "
                f"{self.n_recordings - per_fold}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_filters=self.n_filters, hidden=self.hidden, attn_dim=self.attn_dim,
                           seq_hidden=self.seq_hidden, seq_len=self.seq_len)

    def plan(self, strategy: str, seed: int) -> TransferPlan:
        return TransferPlan(strategy=strategy, matching=self.matching, lr=self.lr,
                            pretrain_epochs=self.pretrain_epochs,
                            transfer_epochs=self.transfer_epochs, val_every=self.val_every,
                            finetune_batch=self.finetune_batch, lambda2=self.lambda2,
                            lambda_kl=self.lambda_kl, seed=seed)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint32)[0])


def fold_splits(cfg: ExperimentConfig) -> list[dict]:
    """Rotating (pool, validation, test) recording-id assignment per fold."""
    n = cfg.n_recordings
    out = []
    for f in range(cfg.folds):
        start = f * (cfg.test_recordings + cfg.val_recordings)
        test = [(start + i) % n for i in range(cfg.test_recordings)]
        val = [(start + cfg.test_recordings + i) % n for i in range(cfg.val_recordings)]
        held = set(test) | set(val)
        pool = [i for i in range(n) if i not in held][: cfg.pool_recordings]
        out.append({"fold": f, "pool": pool, "val": val, "test": test})
    return out


def load_or_generate(cfg: ExperimentConfig):
    if cfg.dataset_dir is not None:
        ds = load_dataset(cfg.dataset_dir)
        if len(ds) != cfg.n_recordings:
            raise ConfigError(
                f"dataset at {cfg.dataset_dir} has {len(ds)} recordings, config says {cfg.n_recordings}")
        return ds
    markov = StageMarkov(epochs_per_recording=cfg.epochs_per_recording)
    emitter = ModalityEmitter.default_mismatch(sigma=cfg.sigma)
    return generate_dataset(markov, emitter, cfg.n_recordings, cfg.data_seed)


@dataclass
class MetricsRow:
    strategy: str
    architecture: str
    subset_size: int
    fold: int
    subset_index: int
    seed: int
    acc: float
    kappa: float
    wf1: float
    n: int

    def sort_key(self):
        return (self.architecture, self.strategy, self.subset_size,
                self.fold, self.subset_index, self.seed)


# ---------------------------------------------------------------------------
# jobs; module-level state lets a worker pool reuse prepared recordings

_CTX: dict = {}


def _init_worker(cfg: ExperimentConfig, prepared: dict[int, PreparedRecording]):
    _CTX["cfg"] = cfg
    _CTX["prepared"] = prepared


def _pretrain_job(desc: tuple):
    arch, fold_info, seed = desc
    cfg: ExperimentConfig = _CTX["cfg"]
    prepared = _CTX["prepared"]
    model = build_model(arch, cfg.model_config())
    pool_recs = [prepared[i] for i in fold_info["pool"]]
    val_recs = [prepared[i] for i in fold_info["val"]]
    plan = cfg.plan("scratch", 0)
    run_seed = derive_seed(seed, fold_info["fold"], ARCHITECTURES.index(arch), 11)
    result = run_pretrain(model, plan, modality_pool(model, pool_recs, "source"), val_recs, run_seed)
    key = (arch, fold_info["fold"], seed)
    return key, {k: p.data for k, p in result.params.items()}, result.log, result.best_val


def _transfer_job(desc: dict):
    cfg: ExperimentConfig = _CTX["cfg"]
    prepared = _CTX["prepared"]
    arch, strategy = desc["arch"], desc["strategy"]
    fold_info, seed = desc["fold_info"], desc["seed"]
    model = build_model(arch, cfg.model_config())
    fold = fold_info["fold"]

    pool_recs = [prepared[i] for i in fold_info["pool"]]
    val_recs = [prepared[i] for i in fold_info["val"]]
    test_recs = [prepared[i] for i in fold_info["test"]]
    subset_recs = [prepared[i] for i in desc["subset_ids"]]

    plan = cfg.plan(strategy, derive_seed(seed, fold, ARCHITECTURES.index(arch),
                                          desc["subset_size"], desc["subset_index"],
                                          STRATEGIES.index(strategy)))
    bundle = StrategyData(
        target_pool=paired_pool(model, subset_recs),
        val_recordings=val_recs,
        source_pool=modality_pool(model, pool_recs, "source") if strategy == "feature_match" else None,
        pretrained=desc.get("pretrained"),
    )
    result = run_strategy(model, plan, bundle)

    test_ids = set(fold_info["test"])
    trained_ids = {rec_id for rec_id, _ in result.audit}
    if trained_ids & test_ids or result.val_rec_ids & test_ids:
        raise RuntimeError(f"test leakage detected in fold {fold}: {trained_ids & test_ids}")

    pred, truth = predict_epochs(model, result.params, test_recs, "target")
    report = MetricsReport.from_predictions(pred, truth)
    row = MetricsRow(strategy=strategy, architecture=arch, subset_size=desc["subset_size"],
                     fold=fold, subset_index=desc["subset_index"], seed=seed,
                     acc=report.accuracy, kappa=report.kappa, wf1=report.weighted_f1, n=report.n)
    return row, result.log, desc


# ---------------------------------------------------------------------------
# experiment driver


def run_experiment(cfg: ExperimentConfig, dataset=None) -> list[MetricsRow]:
    """Run the full comparison grid and write metrics/summary/log CSVs."""
    out = Path(cfg.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    ds = dataset if dataset is not None else load_or_generate(cfg)
    prepared = {rec.rec_id: prepare_recording(rec) for rec in ds.recordings}
    splits = fold_splits(cfg)

    pretrain_descs = [(arch, fold_info, seed)
                      for arch in cfg.architectures for fold_info in splits for seed in cfg.seeds]
    needs_pretrain = any(s != "scratch" for s in cfg.strategies)

    pool = None
    if cfg.jobs > 1:
        pool = multiprocessing.get_context("spawn").Pool(
            cfg.jobs, initializer=_init_worker, initargs=(cfg, prepared))
    _init_worker(cfg, prepared)

    checkpoints: dict[tuple, dict] = {}
    try:
        if needs_pretrain:
            results = (pool.map(_pretrain_job, pretrain_descs) if pool
                       else [_pretrain_job(d) for d in pretrain_descs])
            for key, arrays, log, _ in results:
                checkpoints[key] = arrays
                arch, fold, seed = key
                checkpoint.save_params({k: Tensor(v) for k, v in arrays.items()},
                                       out / "checkpoints" / f"pretrain_{arch}_f{fold}_s{seed}.ckpt")
                write_training_log(out / "logs" / f"pretrain_{arch}_f{fold}_s{seed}.csv", log)

        transfer_descs = []
        for arch in cfg.architectures:
            for fold_info in splits:
                subset_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.data_seed, fold_info["fold"], 23]))
                subsets = split_subsets(fold_info["pool"], subset_rng)
                for seed in cfg.seeds:
                    ckpt = checkpoints.get((arch, fold_info["fold"], seed))
                    if "direct" in cfg.strategies:
                        transfer_descs.append({"arch": arch, "strategy": "direct",
                                               "fold_info": fold_info, "seed": seed,
                                               "subset_size": 0, "subset_index": 0,
                                               "subset_ids": fold_info["pool"][:1],
                                               "pretrained": ckpt})
                    for size in cfg.subset_sizes:
                        for idx, subset_ids in enumerate(subsets[size]):
                            for strategy in cfg.strategies:
                                if strategy == "direct":
                                    continue
                                transfer_descs.append({"arch": arch, "strategy": strategy,
                                                       "fold_info": fold_info, "seed": seed,
                                                       "subset_size": size, "subset_index": idx,
                                                       "subset_ids": subset_ids,
                                                       "pretrained": ckpt})

        results = (pool.map(_transfer_job, transfer_descs) if pool
                   else [_transfer_job(d) for d in transfer_descs])
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    rows = []
    for row, log, desc in results:
        rows.append(row)
        name = (f"{desc['arch']}_f{desc['fold_info']['fold']}_s{desc['seed']}"
                f"_n{desc['subset_size']}_i{desc['subset_index']}_{desc['strategy']}.csv")
        write_training_log(out / "logs" / name, log)
    rows.sort(key=MetricsRow.sort_key)
    write_metrics_csv(out / "metrics.csv", rows)
    write_summary_csv(out / "summary.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "ce_source", "ce_target", "match", "l2", "total", "val_accuracy"])
        for row in log:
            w.writerow([row.step, _fmt(row.ce_source), _fmt(row.ce_target), _fmt(row.match),
                        _fmt(row.l2), _fmt(row.total), _fmt(row.val_accuracy)])


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "architecture", "subset_size", "fold", "subset_index",
                    "seed", "acc", "kappa", "wf1", "n"])
        for r in rows:
            w.writerow([r.strategy, r.architecture, r.subset_size, r.fold, r.subset_index,
                        r.seed, f"{r.acc:.6f}", f"{r.kappa:.6f}", f"{r.wf1:.6f}", r.n])


def summarize(rows: list[MetricsRow]) -> list[dict]:
    """Mean and standard error per (architecture, strategy, subset size)."""
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.architecture, r.strategy, r.subset_size), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        entry = {"architecture": key[0], "strategy": key[1], "subset_size": key[2],
                 "n_runs": len(members)}
        for metric in ("acc", "kappa", "wf1"):
            vals = np.array([getattr(m, metric) for m in members], dtype=np.float64)
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_se"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def write_summary_csv(path, rows: list[MetricsRow]) -> None:
    cols = ["architecture", "strategy", "subset_size", "acc_mean", "acc_se",
            "kappa_mean", "kappa_se", "wf1_mean", "wf1_se", "n_runs"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for entry in summarize(rows):
            w.writerow([entry[c] if not isinstance(entry[c], float) else f"{entry[c]:.6f}"
                        for c in cols])


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(MetricsRow(
                strategy=rec["strategy"], architecture=rec["architecture"],
                subset_size=int(rec["subset_size"]), fold=int(rec["fold"]),
                subset_index=int(rec["subset_index"]), seed=int(rec["seed"]),
                acc=float(rec["acc"]), kappa=float(rec["kappa"]), wf1=float(rec["wf1"]),
                n=int(rec["n"])))
    return rows
