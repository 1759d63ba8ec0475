"""Variation-optimised cross-entropy and the evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import ContractError, DTensor

LOG_FLOOR = 1e-12


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 0.2
    class_weight: float = 1.0

    def __post_init__(self):
        _check_kappa(self.kappa)
        if not (math.isfinite(self.class_weight) and self.class_weight >= 0):
            raise ValueError(f"class weight must be finite and non-negative, got {self.class_weight}")


def _check_kappa(kappa: float) -> None:
    if not 0.0 <= kappa < 1.0:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")


def voce_loss(p, y, kappa: float = 0.2, weight: float = 1.0) -> float:
    """Batch mean of the variation-optimised cross-entropy.

    Anomalies (``y = 1``) contribute ``-weight * log(kappa + (1-kappa) p)``
    and normals ``-log(kappa + (1-kappa)(1-p))``, both divided by ``1 - kappa``.
    """
    _check_kappa(kappa)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = np.log(np.maximum(kappa + (1.0 - kappa) * p, LOG_FLOOR))
    neg = np.log(np.maximum(kappa + (1.0 - kappa) * (1.0 - p), LOG_FLOOR))
    per = -(weight * y * pos + (1.0 - y) * neg) / (1.0 - kappa)
    return float(np.mean(per))


def voce_gradient(p, y, kappa: float = 0.2, weight: float = 1.0):
    """Closed-form d(loss)/dp for a single example (elementwise on arrays)."""
    _check_kappa(kappa)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = -weight / np.maximum(kappa + (1.0 - kappa) * p, LOG_FLOOR)
    neg = 1.0 / np.maximum(kappa + (1.0 - kappa) * (1.0 - p), LOG_FLOOR)
    out = y * pos + (1.0 - y) * neg
    return float(out) if out.ndim == 0 else out


def voce_loss_tensor(p: DTensor, y: int, kappa: float = 0.2, weight: float = 1.0) -> DTensor:
    """Differentiable per-graph loss built from primitive ops."""
    _check_kappa(kappa)
    if y == 1:
        arg = ad.add(ad.scale(p, 1.0 - kappa), kappa)
        coef = -weight / (1.0 - kappa)
    else:
        arg = ad.add(ad.scale(p, -(1.0 - kappa)), 1.0)
        coef = -1.0 / (1.0 - kappa)
    return ad.scale(ad.sum_all(ad.log(arg, floor=LOG_FLOOR)), coef)


def class_ratio_weight(labels) -> float:
    """``ln(1 + N_normal / N_anomalous)`` over a training split."""
    labels = np.asarray(labels)
    n_anom = int((labels == 1).sum())
    n_norm = int((labels == 0).sum())
    if n_anom == 0 or n_norm == 0:
        raise ContractError(f"class weight needs both classes ({n_norm} normal, {n_anom} anomalous)")
    return math.log1p(n_norm / n_anom)


def auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5) -> dict[str, int]:
    pred = np.asarray(scores) >= threshold
    truth = np.asarray(labels) == 1
    return {
        "tp": int((pred & truth).sum()),
        "fp": int((pred & ~truth).sum()),
        "tn": int((~pred & ~truth).sum()),
        "fn": int((~pred & truth).sum()),
    }


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def macro_f1(scores, labels, threshold: float = 0.5) -> float:
    c = confusion(scores, labels, threshold)
    return 0.5 * (_f1(c["tp"], c["fp"], c["fn"]) + _f1(c["tn"], c["fn"], c["fp"]))


@dataclass
class Metrics:
    auc: float | None
    macro_f1: float
    confusion: dict[str, int] = field(default_factory=dict)
    threshold: float = 0.5
    fold: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(scores, labels, threshold: float = 0.5, fold: int | None = None) -> Metrics:
    """All metrics at once; AUC is ``None`` when only one class is present."""
    try:
        a = auc(scores, labels)
    except MetricError:
        a = None
    return Metrics(a, macro_f1(scores, labels, threshold), confusion(scores, labels, threshold), threshold, fold)
