"""Agreement metrics over 5-class confusion matrices, plus a 2-D feature map.

Conventions pinned here: confusion rows are truth, columns prediction;
Cohen's kappa degenerates to 0 when the expected agreement is 1; weighted
F1 weights per-class F1 by true support, so a class with no true samples
contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .preproc import N_STAGES


def confusion_matrix(pred, truth, n_classes: int = N_STAGES) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= n_classes):
        raise ContractError(f"labels must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def accuracy(confusion: np.ndarray) -> float:
    n = confusion.sum()
    if n == 0:
        raise ContractError("empty confusion matrix")
    return float(np.trace(confusion) / n)


def cohens_kappa(confusion: np.ndarray) -> float:
    """Chance-corrected agreement from the confusion marginals.

    When expected agreement reaches 1 (both marginals concentrated on one
    class) the statistic is 0/0; it is defined as 0 here, and
    :class:`MetricsReport` raises its degenerate flag for that case.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    n = confusion.sum()
    if n == 0:
        raise ContractError("empty confusion matrix")
    p_observed = np.trace(confusion) / n
    p_expected = float(np.sum(confusion.sum(axis=1) * confusion.sum(axis=0)) / (n * n))
    if p_expected >= 1.0 - 1e-12:
        return 0.0
    return float((p_observed - p_expected) / (1.0 - p_expected))


def weighted_f1(confusion: np.ndarray) -> float:
    """Support-weighted mean of per-class F1 scores."""
    confusion = np.asarray(confusion, dtype=np.float64)
    n = confusion.sum()
    if n == 0:
        raise ContractError("empty confusion matrix")
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion)
    f1 = np.zeros(confusion.shape[0])
    denom = support + predicted
    nonzero = denom > 0
    f1[nonzero] = 2.0 * tp[nonzero] / denom[nonzero]
    return float(np.sum(f1 * support) / n)


@dataclass
class MetricsReport:
    accuracy: float
    kappa: float
    weighted_f1: float
    confusion: np.ndarray
    n: int
    degenerate_kappa: bool = False

    @classmethod
    def from_predictions(cls, pred, truth) -> "MetricsReport":
        cm = confusion_matrix(pred, truth)
        n = int(cm.sum())
        p_expected = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0)) / (n * n)) if n else 1.0
        return cls(
            accuracy=accuracy(cm),
            kappa=cohens_kappa(cm),
            weighted_f1=weighted_f1(cm),
            confusion=cm,
            n=n,
            degenerate_kappa=p_expected >= 1.0 - 1e-12,
        )


def project_features_2d(features: np.ndarray) -> np.ndarray:
    """Top-2 principal components of mean-centered features, variance-ordered.

    Component signs follow a fixed convention (largest-magnitude loading is
    positive) so repeated runs produce identical coordinates.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError(f"need at least 2 samples of rank-2 data, got shape {features.shape}")
    if features.shape[1] < 2:
        raise DimensionError(f"need at least 2 feature dimensions, got {features.shape[1]}")
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / (features.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :2]
    for j in range(2):
        k = int(np.argmax(np.abs(components[:, j])))
        if components[k, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components
