"""Training losses and the combined transfer objective.

``cross_entropy`` and ``mse_match`` are per-sample means; the combined
objective rescales them to minibatch sums (count times mean) so the
matching weight keeps the documented meaning: with 8 paired samples per
batch of nominal size N_mb, lambda1 = N_mb / 8 gives the matching term the
same relative importance as the source classification term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import ContractError, DimensionError
from .tensor import Tensor

CE_FLOOR = 1e-12


def cross_entropy(posteriors: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over samples of -log p[label], with a 1e-12 floor inside the log."""
    labels = np.asarray(labels)
    n, k = posteriors.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} posterior rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in 0..{k - 1}")
    onehot = np.zeros((n, k), dtype=posteriors.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = tg.mul(tg.log(posteriors, floor=CE_FLOOR), Tensor(onehot))
    return tg.mul(tg.sum_all(picked), -1.0 / n)


def mse_match(f_source: Tensor, f_target: Tensor) -> Tensor:
    """Mean squared difference over all entries of two paired feature matrices."""
    if f_source.shape != f_target.shape:
        raise DimensionError(f"feature shapes differ: {f_source.shape} vs {f_target.shape}")
    diff = tg.sub(f_source, f_target)
    return tg.mean_all(tg.mul(diff, diff))


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    cross = tg.mul(tg.matmul(a, tg.transpose(b)), -2.0)
    with_rows = tg.add_colvec(cross, tg.row_sums(tg.mul(a, a)))
    return tg.add_rowvec(with_rows, tg.row_sums(tg.mul(b, b)))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled samples."""
    z = np.concatenate([a, b], axis=0).astype(np.float64)
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (z @ z.T), 0.0)
    upper = d2[np.triu_indices(len(z), k=1)]
    med = float(np.median(np.sqrt(upper)))
    return med if med > 1e-8 else 1.0


def mmd_match(f_source: Tensor, f_target: Tensor, bandwidth: float | None = None) -> Tensor:
    """Unbiased squared maximum mean discrepancy with a Gaussian kernel.

    Kernel k(a, b) = exp(-|a-b|^2 / (2 h^2)) where h defaults to the median
    pairwise distance of the pooled samples; the bandwidth is treated as a
    constant (no gradient flows through the heuristic). Works on
    distributions, so the two sides may have different sample counts.
    """
    n, m = f_source.shape[0], f_target.shape[0]
    if n < 2 or m < 2:
        raise ContractError(f"mmd_match needs at least 2 samples per side, got {n} and {m}")
    if f_source.shape[1] != f_target.shape[1]:
        raise DimensionError(f"feature dims differ: {f_source.shape} vs {f_target.shape}")
    h = median_bandwidth(f_source.data, f_target.data) if bandwidth is None else bandwidth
    coef = -1.0 / (2.0 * h * h)

    def kernel_sum(a, b, mask_diag):
        k = tg.exp(tg.mul(_pairwise_sq_dists(a, b), coef))
        if mask_diag:
            mask = 1.0 - np.eye(a.shape[0], dtype=k.data.dtype)
            k = tg.mul(k, Tensor(mask))
        return tg.sum_all(k)

    term_ss = tg.mul(kernel_sum(f_source, f_source, True), 1.0 / (n * (n - 1)))
    term_tt = tg.mul(kernel_sum(f_target, f_target, True), 1.0 / (m * (m - 1)))
    term_st = tg.mul(kernel_sum(f_source, f_target, False), -2.0 / (n * m))
    return tg.add(tg.add(term_ss, term_tt), term_st)


def kl_posterior_reg(p_current: Tensor, p_frozen: np.ndarray) -> Tensor:
    """Mean KL(p_frozen || p_current) with floored logs.

    Gradient flows only through the current posteriors; the frozen ones are
    plain arrays captured from the pretrained network.
    """
    p_frozen = np.asarray(p_frozen, dtype=np.float64)
    if p_frozen.shape != tuple(p_current.shape):
        raise DimensionError(f"posterior shapes differ: {p_frozen.shape} vs {p_current.shape}")
    if np.any(p_frozen < 0) or np.any(np.abs(p_frozen.sum(axis=1) - 1.0) > 1e-4):
        raise ContractError("frozen posteriors are not valid distributions")
    if np.any(p_current.data < 0) or np.any(np.abs(p_current.data.sum(axis=1) - 1.0) > 1e-4):
        raise ContractError("current posteriors are not valid distributions")
    n = p_frozen.shape[0]
    entropy = float(np.sum(p_frozen * np.log(p_frozen + CE_FLOOR)) / n)
    cross = tg.mul(tg.sum_all(tg.mul(Tensor(p_frozen.astype(p_current.data.dtype)),
                                     tg.log(p_current, floor=CE_FLOOR))), 1.0 / n)
    return tg.sub(entropy, cross)


def l2_penalty(params: dict[str, Tensor]) -> Tensor:
    """Sum of squares over all trainable parameters."""
    total = None
    for p in params.values():
        term = tg.sum_all(tg.mul(p, p))
        total = term if total is None else tg.add(total, term)
    if total is None:
        raise ContractError("l2_penalty needs at least one parameter")
    return total


@dataclass
class LossBreakdown:
    """The four components of the combined transfer loss plus their weights.

    ``ce_source`` and ``ce_target`` are minibatch sums of per-sample cross
    entropy, ``match`` is the matching loss over the paired block, ``l2`` the
    sum of squared weights; ``total`` is the float value of the optimized
    scalar ``node``.
    """

    ce_source: float
    ce_target: float
    match: float
    l2: float
    lambda1: float
    lambda2: float
    total: float
    node: Tensor

    def recomposed(self) -> float:
        return self.ce_source + self.ce_target + self.lambda1 * self.match + self.lambda2 * self.l2


def combined_loss(source_post: Tensor, source_labels: np.ndarray, n_source_samples: int,
                  target_post: Tensor, target_labels: np.ndarray, n_target_samples: int,
                  f_source: Tensor, f_target: Tensor,
                  params: dict[str, Tensor], lambda1: float, lambda2: float,
                  matching: str = "mse") -> LossBreakdown:
    """Compose the transfer objective for one minibatch.

    Source-only samples contribute only the source classification term; the
    paired block contributes the target classification and matching terms.
    Classification terms are minibatch sums (sample count times the mean);
    the MSE matching term sums per-pair means over the pairs while the MMD
    variant is a single distribution-level estimate.
    """
    ce_s = tg.mul(cross_entropy(source_post, source_labels), float(n_source_samples))
    ce_t = tg.mul(cross_entropy(target_post, target_labels), float(n_target_samples))
    if matching == "mse":
        match = tg.mul(mse_match(f_source, f_target), float(n_target_samples))
    elif matching == "mmd":
        match = mmd_match(f_source, f_target)
    else:
        raise ContractError(f"unknown matching loss '{matching}'")
    l2 = l2_penalty(params)
    node = tg.add(tg.add(ce_s, ce_t), tg.add(tg.mul(match, lambda1), tg.mul(l2, lambda2)))
    return LossBreakdown(
        ce_source=float(ce_s.data), ce_target=float(ce_t.data), match=float(match.data),
        l2=float(l2.data), lambda1=lambda1, lambda2=lambda2, total=float(node.data), node=node,
    )
