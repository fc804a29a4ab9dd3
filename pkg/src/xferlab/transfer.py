"""The five training strategies and the paired-minibatch protocol.

Strategies:

* ``scratch``       train the target network from random init on target data
* ``direct``        evaluate the source-pretrained network as-is (no steps)
* ``finetune``      continue training the pretrained network on target data
* ``finetune_kl``   finetuning plus a KL pull toward the frozen pretrained
                    network's posteriors
* ``feature_match`` duplicate the pretrained network into a source and a
                    target copy trained concurrently; mixed minibatches of
                    8 paired samples plus source-only samples, with the
                    matching loss tying paired features together

Feature-matching minibatches follow the fixed recipe: every batch takes 8
paired samples from the target pool and a proportional slice of the source
pool so that one pass over the batches consumes both pools exactly once;
the matching weight is the nominal batch size divided by 8. Every strategy
evaluates on the validation recordings every ``val_every`` iterations (plus
once at the end) and returns the parameters of the best validation
accuracy, earliest step winning ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as tg
from .data import PairedRecording, aggregate_ensemble, sample_sequences
from .errors import ConfigError, ContractError
from .losses import (combined_loss, cross_entropy, kl_posterior_reg, l2_penalty)
from .models import EpochStager, SequenceStager, load_arrays
from .optim import Adam
from .preproc import RawChannel, preprocess_channel
from .tensor import Tensor

STRATEGIES = ("scratch", "direct", "finetune", "finetune_kl", "feature_match")
MATCHING_KINDS = ("mse", "mmd")


@dataclass
class TransferPlan:
    strategy: str = "feature_match"
    matching: str = "mse"
    lr: float = 1e-4
    pretrain_epochs: int = 10
    transfer_epochs: int = 20
    val_every: int = 200
    finetune_batch: int = 32
    target_pairs_per_batch: int = 8
    lambda2: float = 1e-4
    lambda_kl: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if self.matching not in MATCHING_KINDS:
            raise ConfigError(f"unknown matching loss '{self.matching}', expected one of {MATCHING_KINDS}")
        for name in ("pretrain_epochs", "transfer_epochs", "val_every",
                     "finetune_batch", "target_pairs_per_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class MinibatchSpec:
    """Composition of one feature-matching minibatch."""

    n_target_pairs: int
    n_source_only: int

    @property
    def n_mb(self) -> int:
        return self.n_target_pairs + self.n_source_only

    @property
    def lambda1(self) -> float:
        return self.n_mb / self.n_target_pairs

    @classmethod
    def from_pool_sizes(cls, n_source: int, n_target: int, pairs: int = 8) -> "MinibatchSpec":
        if n_source < 1 or n_target < 1:
            raise ContractError("both sample pools must be non-empty")
        n_source_only = round(pairs * n_source / n_target)
        if n_source_only < 1:
            raise ContractError(
                f"source pool too small for the minibatch rule: {n_source} source vs {n_target} target")
        return cls(n_target_pairs=pairs, n_source_only=n_source_only)


def epoch_batches(source_pool: list, target_pool: list, spec: MinibatchSpec,
                  rng: np.random.Generator):
    """Yield (source-only items, paired items) batches for one training epoch.

    Both pools are shuffled and consumed exactly once: paired items go out
    in blocks of ``spec.n_target_pairs`` (the final block may be short) and
    the source pool is sliced proportionally across the batches.
    """
    if not source_pool or not target_pool:
        raise ContractError("both sample pools must be non-empty")
    s_order = rng.permutation(len(source_pool))
    t_order = rng.permutation(len(target_pool))
    n_batches = math.ceil(len(target_pool) / spec.n_target_pairs)
    n_source = len(source_pool)
    for i in range(n_batches):
        t_lo, t_hi = i * spec.n_target_pairs, min((i + 1) * spec.n_target_pairs, len(target_pool))
        s_lo = (i * n_source) // n_batches
        s_hi = ((i + 1) * n_source) // n_batches
        yield ([source_pool[j] for j in s_order[s_lo:s_hi]],
               [target_pool[j] for j in t_order[t_lo:t_hi]])


# ---------------------------------------------------------------------------
# prepared recordings and sample pools


@dataclass
class PreparedRecording:
    rec_id: int
    source: np.ndarray          # (E, frames, bins) float32, normalized
    target: np.ndarray
    labels: np.ndarray


def prepare_recording(rec: PairedRecording) -> PreparedRecording:
    source = preprocess_channel(RawChannel(rec.source, rec.fs, "source"), rec.labels)
    target = preprocess_channel(RawChannel(rec.target, rec.fs, "target"), rec.labels)
    return PreparedRecording(
        rec_id=rec.rec_id,
        source=np.stack([e.frames for e in source]),
        target=np.stack([e.frames for e in target]),
        labels=np.asarray(rec.labels, dtype=np.int64),
    )


class Sample(NamedTuple):
    x: np.ndarray
    y: object                   # int label (epoch) or (M,) labels (window)
    rec_id: int
    modality: str


class PairedSample(NamedTuple):
    x_source: np.ndarray
    x_target: np.ndarray
    y: object
    rec_id: int


def paired_pool(model, recs: list[PreparedRecording]) -> list[PairedSample]:
    out = []
    for rec in recs:
        if isinstance(model, SequenceStager):
            m = model.cfg.seq_len
            for start in sample_sequences(len(rec.labels), m):
                out.append(PairedSample(rec.source[start: start + m], rec.target[start: start + m],
                                        rec.labels[start: start + m], rec.rec_id))
        else:
            for i in range(len(rec.labels)):
                out.append(PairedSample(rec.source[i], rec.target[i], int(rec.labels[i]), rec.rec_id))
    return out


def modality_pool(model, recs: list[PreparedRecording], modality: str) -> list[Sample]:
    out = []
    for rec in recs:
        arr = rec.source if modality == "source" else rec.target
        if isinstance(model, SequenceStager):
            m = model.cfg.seq_len
            for start in sample_sequences(len(rec.labels), m):
                out.append(Sample(arr[start: start + m], rec.labels[start: start + m],
                                  rec.rec_id, modality))
        else:
            for i in range(len(rec.labels)):
                out.append(Sample(arr[i], int(rec.labels[i]), rec.rec_id, modality))
    return out


def target_view(pool: list[PairedSample]) -> list[Sample]:
    return [Sample(p.x_target, p.y, p.rec_id, "target") for p in pool]


def _flat_labels(model, items) -> np.ndarray:
    if isinstance(model, SequenceStager):
        return model.flatten_labels(np.stack([np.asarray(s.y) for s in items]))
    return np.asarray([s.y for s in items], dtype=np.int64)


def _subset_rows(model, positions: np.ndarray, n_total: int) -> np.ndarray:
    """Row indices of the given window positions in a position-major output."""
    positions = np.asarray(positions, dtype=np.intp)
    if isinstance(model, SequenceStager):
        m = model.cfg.seq_len
        return (np.arange(m, dtype=np.intp)[:, None] * n_total + positions[None, :]).reshape(-1)
    return positions


# ---------------------------------------------------------------------------
# evaluation


_EVAL_CHUNK = 256


def predict_epochs(model, params: dict, recs: list[PreparedRecording],
                   modality: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch stage predictions pooled over recordings.

    The sequence model samples windows at shift 1 and aggregates the
    overlapping predictions per epoch by summing log posteriors.
    """
    preds, truths = [], []
    for rec in recs:
        arr = rec.source if modality == "source" else rec.target
        if isinstance(model, SequenceStager):
            preds.append(_predict_sequence_recording(model, params, arr))
        else:
            chunks = []
            for lo in range(0, len(arr), _EVAL_CHUNK):
                _, post = model.forward(params, arr[lo: lo + _EVAL_CHUNK])
                chunks.append(np.argmax(post.data, axis=1))
            preds.append(np.concatenate(chunks))
        truths.append(rec.labels)
    return np.concatenate(preds), np.concatenate(truths)


def _predict_sequence_recording(model: SequenceStager, params: dict, arr: np.ndarray) -> np.ndarray:
    n_epochs = len(arr)
    m = model.cfg.seq_len
    feats = []
    for lo in range(0, n_epochs, _EVAL_CHUNK):
        feats.append(model.encode_epochs(params, arr[lo: lo + _EVAL_CHUNK]).data)
    feats = np.concatenate(feats)
    starts = sample_sequences(n_epochs, m)
    idx = np.asarray(starts, dtype=np.intp)[:, None] + np.arange(m, dtype=np.intp)[None, :]
    flat = feats[idx.reshape(-1)]
    _, post = model.head(params, Tensor(flat), len(starts))
    blocks = post.data.reshape(m, len(starts), -1).transpose(1, 0, 2)
    labels, _ = aggregate_ensemble(list(zip(starts, blocks)), n_epochs)
    return labels.astype(np.int64)


def eval_accuracy(model, params: dict, recs: list[PreparedRecording], modality: str) -> float:
    pred, truth = predict_epochs(model, params, recs, modality)
    return float(np.mean(pred == truth))


def epoch_feature_map(model, params: dict, arr: np.ndarray) -> np.ndarray:
    """One feature vector per epoch, for the 2-D projection export.

    The epoch stager uses its pooled features directly. The sequence model
    tiles non-overlapping windows (final window aligned to the end) and
    takes each epoch's per-position output vector, later windows winning in
    the small tail overlap.
    """
    if not isinstance(model, SequenceStager):
        feats = []
        for lo in range(0, len(arr), _EVAL_CHUNK):
            feats.append(model.forward(params, arr[lo: lo + _EVAL_CHUNK])[0].data)
        return np.concatenate(feats)
    n_epochs, m = len(arr), model.cfg.seq_len
    if n_epochs < m:
        raise ContractError(f"recording has {n_epochs} epochs, need at least {m}")
    starts = list(range(0, n_epochs - m + 1, m))
    if starts[-1] != n_epochs - m:
        starts.append(n_epochs - m)
    idx = np.asarray(starts, dtype=np.intp)[:, None] + np.arange(m, dtype=np.intp)[None, :]
    enc = model.encode_epochs(params, arr[idx.reshape(-1)].reshape(-1, *arr.shape[1:]))
    features, _ = model.head(params, enc, len(starts))
    blocks = features.data.reshape(m, len(starts), -1).transpose(1, 0, 2)
    out = np.zeros((n_epochs, blocks.shape[2]), dtype=np.float32)
    for w, start in enumerate(starts):
        out[start: start + m] = blocks[w]
    return out


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainLogRow:
    step: int
    ce_source: float | None = None
    ce_target: float | None = None
    match: float | None = None
    l2: float | None = None
    total: float | None = None
    val_accuracy: float | None = None


@dataclass
class StrategyResult:
    params: dict[str, Tensor]
    log: list[TrainLogRow]
    best_val: float
    best_step: int
    n_steps: int
    audit: set = field(default_factory=set)      # (rec_id, modality) read during training
    val_rec_ids: set = field(default_factory=set)
    source_params: dict | None = None            # second network of feature matching


@dataclass
class StrategyData:
    """Everything one strategy run may read."""

    target_pool: list[PairedSample]
    val_recordings: list[PreparedRecording]
    source_pool: list[Sample] | None = None
    pretrained: dict[str, np.ndarray] | None = None
    val_modality: str = "target"


class _BestTracker:
    def __init__(self):
        self.acc = -1.0
        self.step = -1
        self.snapshots = None

    def offer(self, acc: float, step: int, param_dicts: list[dict]):
        if acc > self.acc:
            self.acc = acc
            self.step = step
            self.snapshots = [{k: p.data.copy() for k, p in d.items()} for d in param_dicts]


def _params_from_arrays(model, arrays: dict[str, np.ndarray], rng: np.random.Generator) -> dict:
    params = model.init_params(rng)
    load_arrays(params, arrays)
    return params


def _restore(params: dict, snapshot: dict):
    for k, p in params.items():
        p.data = snapshot[k]


def run_strategy(model, plan: TransferPlan, bundle: StrategyData) -> StrategyResult:
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, STRATEGIES.index(plan.strategy)]))
    needs_checkpoint = plan.strategy in ("direct", "finetune", "finetune_kl", "feature_match")
    if needs_checkpoint and bundle.pretrained is None:
        raise ConfigError(f"strategy '{plan.strategy}' requires a pretrained checkpoint")

    if plan.strategy == "direct":
        params = _params_from_arrays(model, bundle.pretrained, rng)
        return StrategyResult(params=params, log=[], best_val=float("nan"), best_step=0,
                              n_steps=0, val_rec_ids={r.rec_id for r in bundle.val_recordings})

    if plan.strategy == "feature_match":
        if bundle.source_pool is None:
            raise ConfigError("feature matching needs a source-dataset sample pool")
        return _train_feature_match(model, plan, bundle, rng)

    if plan.strategy == "scratch":
        params = model.init_params(rng)
    else:
        params = _params_from_arrays(model, bundle.pretrained, rng)
    frozen = bundle.pretrained if plan.strategy == "finetune_kl" else None
    return _train_single(model, params, target_view(bundle.target_pool), plan,
                         plan.transfer_epochs, bundle, rng, frozen=frozen, ce_field="ce_target")


def run_pretrain(model, plan: TransferPlan, source_pool: list[Sample],
                 val_recordings: list[PreparedRecording], seed: int) -> StrategyResult:
    """Train from scratch on source-modality samples (the pretraining stage)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    params = model.init_params(rng)
    bundle = StrategyData(target_pool=[], val_recordings=val_recordings, val_modality="source")
    return _train_single(model, params, source_pool, plan, plan.pretrain_epochs,
                         bundle, rng, frozen=None, ce_field="ce_source")


def _train_single(model, params: dict, samples: list[Sample], plan: TransferPlan,
                  n_epochs: int, bundle: StrategyData, rng: np.random.Generator,
                  frozen: dict | None, ce_field: str) -> StrategyResult:
    if not samples:
        raise ContractError("training pool is empty")
    opt = Adam(params, lr=plan.lr)
    frozen_params = None
    if frozen is not None:
        frozen_params = {k: Tensor(v.copy()) for k, v in frozen.items()}
    log: list[TrainLogRow] = []
    best = _BestTracker()
    audit: set = set()
    step = 0
    for _ in range(n_epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), plan.finetune_batch):
            batch = [samples[j] for j in order[lo: lo + plan.finetune_batch]]
            audit.update((s.rec_id, s.modality) for s in batch)
            x = np.stack([s.x for s in batch])
            y = _flat_labels(model, batch)
            _, post = model.forward(params, x)
            ce = cross_entropy(post, y)
            l2 = l2_penalty(params)
            node = tg.add(ce, tg.mul(l2, plan.lambda2))
            if frozen_params is not None:
                frozen_post = model.forward(frozen_params, x)[1].data
                node = tg.add(node, tg.mul(kl_posterior_reg(post, frozen_post), plan.lambda_kl))
            tg.backward(node)
            opt.step()
            opt.zero_grad()
            step += 1
            row = TrainLogRow(step=step, l2=float(l2.data), total=float(node.data))
            setattr(row, ce_field, float(ce.data))
            if step % plan.val_every == 0:
                acc = eval_accuracy(model, params, bundle.val_recordings, bundle.val_modality)
                row.val_accuracy = acc
                best.offer(acc, step, [params])
            log.append(row)
    if step % plan.val_every != 0:
        acc = eval_accuracy(model, params, bundle.val_recordings, bundle.val_modality)
        log.append(TrainLogRow(step=step, val_accuracy=acc))
        best.offer(acc, step, [params])
    _restore(params, best.snapshots[0])
    return StrategyResult(params=params, log=log, best_val=best.acc, best_step=best.step,
                          n_steps=step, audit=audit,
                          val_rec_ids={r.rec_id for r in bundle.val_recordings})


def _train_feature_match(model, plan: TransferPlan, bundle: StrategyData,
                         rng: np.random.Generator) -> StrategyResult:
    src_params = _params_from_arrays(model, bundle.pretrained, rng)
    tgt_params = _params_from_arrays(model, bundle.pretrained, rng)
    union = {f"source/{k}": v for k, v in src_params.items()}
    union.update({f"target/{k}": v for k, v in tgt_params.items()})
    opt = Adam(union, lr=plan.lr)
    spec = MinibatchSpec.from_pool_sizes(len(bundle.source_pool), len(bundle.target_pool),
                                         plan.target_pairs_per_batch)
    log: list[TrainLogRow] = []
    best = _BestTracker()
    audit: set = set()
    step = 0
    for _ in range(plan.transfer_epochs):
        for src_items, pair_items in epoch_batches(bundle.source_pool, bundle.target_pool, spec, rng):
            audit.update((s.rec_id, s.modality) for s in src_items)
            audit.update((p.rec_id, "source") for p in pair_items)
            audit.update((p.rec_id, "target") for p in pair_items)
            n_only, n_pairs = len(src_items), len(pair_items)
            x_source = np.stack([s.x for s in src_items] + [p.x_source for p in pair_items])
            feats_s, post_s = model.forward(src_params, x_source)
            n_total = n_only + n_pairs
            rows_only = _subset_rows(model, np.arange(n_only), n_total)
            rows_pairs = _subset_rows(model, np.arange(n_only, n_total), n_total)
            post_s_only = tg.take_rows(post_s, rows_only)
            f_s = tg.take_rows(feats_s, rows_pairs)
            x_target = np.stack([p.x_target for p in pair_items])
            f_t, post_t = model.forward(tgt_params, x_target)
            breakdown = combined_loss(
                post_s_only, _flat_labels(model, src_items), n_only,
                post_t, _flat_labels(model, pair_items), n_pairs,
                f_s, f_t, union, spec.lambda1, plan.lambda2, plan.matching)
            tg.backward(breakdown.node)
            opt.step()
            opt.zero_grad()
            step += 1
            row = TrainLogRow(step=step, ce_source=breakdown.ce_source,
                              ce_target=breakdown.ce_target, match=breakdown.match,
                              l2=breakdown.l2, total=breakdown.total)
            if step % plan.val_every == 0:
                acc = eval_accuracy(model, tgt_params, bundle.val_recordings, bundle.val_modality)
                row.val_accuracy = acc
                best.offer(acc, step, [tgt_params, src_params])
            log.append(row)
    if step % plan.val_every != 0:
        acc = eval_accuracy(model, tgt_params, bundle.val_recordings, bundle.val_modality)
        log.append(TrainLogRow(step=step, val_accuracy=acc))
        best.offer(acc, step, [tgt_params, src_params])
    _restore(tgt_params, best.snapshots[0])
    _restore(src_params, best.snapshots[1])
    return StrategyResult(params=tgt_params, log=log, best_val=best.acc, best_step=best.step,
                          n_steps=step, audit=audit,
                          val_rec_ids={r.rec_id for r in bundle.val_recordings},
                          source_params=src_params)
