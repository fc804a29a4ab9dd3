"""The two staging networks.

Both take normalized log-spectrogram epochs (29 frames x 129 bins) and share
the same epoch encoder: a learned filterbank over the frequency axis, a
bidirectional GRU over the frames, and additive attention pooling into a
single feature vector per epoch.

``EpochStager`` (architecture id "arnn") classifies one epoch at a time from
that vector. ``SequenceStager`` (architecture id "seqsleepnet") encodes M
consecutive epochs, runs a second bidirectional GRU across the sequence and
classifies every position with a shared linear layer; its per-position
output vectors are the features used for matching.

Every network is a flat ``{name: Tensor}`` dict with stable names (e.g.
"arnn.filterbank.W") so checkpoints and the extractor/classifier split stay
trivial: the classifier is exactly the final linear layer, the feature
extractor is everything else.

Batching convention: an (n, T, F) batch is flattened to (n*T, F) rows in
sample-major order, so step t of sample i lives at row i*T + t. The GRU
precomputes all input projections with one matmul and gathers the rows it
needs per step, which keeps the tape size independent of the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import DimensionError
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_bins: int = 129
    n_filters: int = 32
    hidden: int = 64
    attn_dim: int = 64
    seq_hidden: int = 64
    seq_len: int = 10
    n_classes: int = 5


GATES = ("z", "r", "h")


def gru_cell_init(params: dict, prefix: str, in_dim: int, hidden: int, rng: np.random.Generator):
    for gate in GATES:
        params[f"{prefix}.W_x{gate}"] = tg.init_uniform((in_dim, hidden), in_dim, rng)
        params[f"{prefix}.W_h{gate}"] = tg.init_uniform((hidden, hidden), hidden, rng)
        params[f"{prefix}.b_{gate}"] = tg.zeros_param((hidden,))


def gru_sequence(params: dict, prefix: str, x_flat: Tensor, n: int, steps: int,
                 reverse: bool = False) -> list[Tensor]:
    """Run one GRU direction over a flattened (n*steps, in_dim) batch.

    Returns one (n, hidden) tensor per step, indexed by step position
    regardless of direction. Equations: z and r are sigmoid gates, the
    candidate is tanh(x W_xh + (r * h) W_hh + b_h), and the new state is
    (1 - z) * h + z * candidate, starting from a zero state.
    """
    w_xz, w_xr, w_xh = (params[f"{prefix}.W_x{g}"] for g in GATES)
    w_hz, w_hr, w_hh = (params[f"{prefix}.W_h{g}"] for g in GATES)
    b_z, b_r, b_h = (params[f"{prefix}.b_{g}"] for g in GATES)
    hidden = w_hz.shape[0]

    gx_z = tg.add_rowvec(tg.matmul(x_flat, w_xz), b_z)
    gx_r = tg.add_rowvec(tg.matmul(x_flat, w_xr), b_r)
    gx_h = tg.add_rowvec(tg.matmul(x_flat, w_xh), b_h)

    base = np.arange(n, dtype=np.intp) * steps
    h = Tensor(np.zeros((n, hidden), dtype=x_flat.data.dtype))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outs: list[Tensor | None] = [None] * steps
    for t in order:
        idx = base + t
        xz = tg.take_rows(gx_z, idx)
        xr = tg.take_rows(gx_r, idx)
        xh = tg.take_rows(gx_h, idx)
        z = tg.sigmoid(tg.add(xz, tg.matmul(h, w_hz)))
        r = tg.sigmoid(tg.add(xr, tg.matmul(h, w_hr)))
        cand = tg.tanh(tg.add(xh, tg.matmul(tg.mul(r, h), w_hh)))
        h = tg.add(tg.mul(tg.sub(1.0, z), h), tg.mul(z, cand))
        outs[t] = h
    return outs


def bigru_steps(params: dict, fwd_prefix: str, bwd_prefix: str, x_flat: Tensor,
                n: int, steps: int) -> list[Tensor]:
    """Forward and backward GRU passes concatenated per step: (n, 2*hidden) each."""
    fwd = gru_sequence(params, fwd_prefix, x_flat, n, steps, reverse=False)
    bwd = gru_sequence(params, bwd_prefix, x_flat, n, steps, reverse=True)
    return [tg.concat_cols([f, b]) for f, b in zip(fwd, bwd)]


def filterbank_forward(spec: Tensor, weights: Tensor) -> Tensor:
    """Linear combination of frequency bins per frame."""
    return tg.matmul(spec, weights)


def attention_pool(step_vectors: list[Tensor], w: Tensor, b: Tensor, u: Tensor) -> Tensor:
    """Additive attention over steps: softmax-weighted sum of the step vectors."""
    scores = [tg.matmul(tg.tanh(tg.add_rowvec(tg.matmul(h, w), b)), u) for h in step_vectors]
    alpha = tg.softmax_rows(tg.concat_cols(scores))
    pooled = None
    for t, h in enumerate(step_vectors):
        term = tg.mul_colvec(h, tg.slice_cols(alpha, t, t + 1))
        pooled = term if pooled is None else tg.add(pooled, term)
    return pooled


def _encoder_init(params: dict, prefix: str, cfg: ModelConfig, rng: np.random.Generator):
    params[f"{prefix}filterbank.W"] = tg.init_uniform((cfg.n_bins, cfg.n_filters), cfg.n_bins, rng)
    gru_cell_init(params, f"{prefix}gru_fwd", cfg.n_filters, cfg.hidden, rng)
    gru_cell_init(params, f"{prefix}gru_bwd", cfg.n_filters, cfg.hidden, rng)
    params[f"{prefix}attention.W"] = tg.init_uniform((2 * cfg.hidden, cfg.attn_dim), 2 * cfg.hidden, rng)
    params[f"{prefix}attention.b"] = tg.zeros_param((cfg.attn_dim,))
    params[f"{prefix}attention.u"] = tg.init_uniform((cfg.attn_dim, 1), cfg.attn_dim, rng)


def _encoder_forward(params: dict, prefix: str, batch: np.ndarray, cfg: ModelConfig) -> Tensor:
    """(n, frames, bins) -> (n, 2*hidden) attention-pooled epoch features."""
    n, frames, bins = batch.shape
    if bins != cfg.n_bins:
        raise DimensionError(f"expected {cfg.n_bins} frequency bins, got {bins}")
    flat = Tensor(np.ascontiguousarray(batch.reshape(n * frames, bins), dtype=np.float32))
    filtered = filterbank_forward(flat, params[f"{prefix}filterbank.W"])
    steps = bigru_steps(params, f"{prefix}gru_fwd", f"{prefix}gru_bwd", filtered, n, frames)
    return attention_pool(steps, params[f"{prefix}attention.W"],
                          params[f"{prefix}attention.b"], params[f"{prefix}attention.u"])


def classify(features: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tg.softmax_rows(tg.add_rowvec(tg.matmul(features, w), b))


def split_params(params: dict, classifier_prefix: str) -> tuple[dict, dict]:
    """Disjoint, exhaustive partition into (feature extractor, classifier)."""
    extractor = {k: v for k, v in params.items() if not k.startswith(classifier_prefix)}
    classifier = {k: v for k, v in params.items() if k.startswith(classifier_prefix)}
    return extractor, classifier


def merge_params(extractor: dict, classifier: dict) -> dict:
    return {**extractor, **classifier}


def clone_params(params: dict) -> dict:
    out = {}
    for k, p in params.items():
        t = Tensor(p.data.copy(), requires_grad=p.requires_grad)
        out[k] = t
    return out


def load_arrays(params: dict, arrays: dict[str, np.ndarray]):
    """Overwrite parameter values in place from a checkpoint dict."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DimensionError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in params.items():
        if arrays[k].shape != p.data.shape:
            raise DimensionError(f"checkpoint shape {arrays[k].shape} != {p.data.shape} for '{k}'")
        p.data = arrays[k].astype(np.float32).copy()


class EpochStager:
    """One-to-one staging: one epoch in, one posterior out."""

    arch = "arnn"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        _encoder_init(params, "arnn.", self.cfg, rng)
        params["arnn.classifier.W"] = tg.init_uniform((2 * self.cfg.hidden, self.cfg.n_classes),
                                                      2 * self.cfg.hidden, rng)
        params["arnn.classifier.b"] = tg.zeros_param((self.cfg.n_classes,))
        return params

    def forward(self, params: dict, batch: np.ndarray) -> tuple[Tensor, Tensor]:
        """batch (n, frames, bins) -> features (n, 2H), posteriors (n, 5)."""
        features = _encoder_forward(params, "arnn.", batch, self.cfg)
        posteriors = classify(features, params["arnn.classifier.W"], params["arnn.classifier.b"])
        return features, posteriors

    def split(self, params: dict) -> tuple[dict, dict]:
        return split_params(params, "arnn.classifier.")


class SequenceStager:
    """Many-to-many staging over sequences of consecutive epochs."""

    arch = "seqsleepnet"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        _encoder_init(params, "seq.encoder.", self.cfg, rng)
        gru_cell_init(params, "seq.gru_fwd", 2 * self.cfg.hidden, self.cfg.seq_hidden, rng)
        gru_cell_init(params, "seq.gru_bwd", 2 * self.cfg.hidden, self.cfg.seq_hidden, rng)
        params["seq.classifier.W"] = tg.init_uniform((2 * self.cfg.seq_hidden, self.cfg.n_classes),
                                                     2 * self.cfg.seq_hidden, rng)
        params["seq.classifier.b"] = tg.zeros_param((self.cfg.n_classes,))
        return params

    def encode_epochs(self, params: dict, batch: np.ndarray) -> Tensor:
        """(n, frames, bins) epochs -> (n, 2H) encoder features."""
        return _encoder_forward(params, "seq.encoder.", batch, self.cfg)

    def head(self, params: dict, epoch_feats: Tensor, n: int) -> tuple[Tensor, Tensor]:
        """Sequence-level pass over (n * M, 2H) sample-major encoder features.

        Returns per-position output features and posteriors as (M*n, ...)
        matrices in position-major order: row m*n + i is position m of
        window i; :meth:`flatten_labels` orders a label matrix the same way.
        """
        steps = bigru_steps(params, "seq.gru_fwd", "seq.gru_bwd", epoch_feats, n, self.cfg.seq_len)
        features = tg.concat_rows(steps)
        posteriors = classify(features, params["seq.classifier.W"], params["seq.classifier.b"])
        return features, posteriors

    def forward(self, params: dict, batch: np.ndarray) -> tuple[Tensor, Tensor]:
        """batch (n, M, frames, bins) -> features (M*n, 2H_seq), posteriors (M*n, 5)."""
        n, m, frames, bins = batch.shape
        if m != self.cfg.seq_len:
            raise DimensionError(f"expected sequences of length {self.cfg.seq_len}, got {m}")
        epoch_feats = self.encode_epochs(params, batch.reshape(n * m, frames, bins))
        return self.head(params, epoch_feats, n)

    @staticmethod
    def flatten_labels(labels: np.ndarray) -> np.ndarray:
        """(n, M) window labels -> (M*n,) vector matching forward's row order."""
        return np.ascontiguousarray(labels.T).reshape(-1)

    def split(self, params: dict) -> tuple[dict, dict]:
        return split_params(params, "seq.classifier.")


def build_model(arch: str, cfg: ModelConfig):
    if arch == EpochStager.arch:
        return EpochStager(cfg)
    if arch == SequenceStager.arch:
        return SequenceStager(cfg)
    raise ValueError(f"unknown architecture '{arch}'")
