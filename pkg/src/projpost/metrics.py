"""Calibration and discrimination metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_BINS = 15
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricsReport:
    confidence: float
    accuracy: float
    nll: float
    brier: float
    ece: float
    mce: float
    bin_count: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def classification_metrics(probs, targets, bins: int = DEFAULT_BINS) -> MetricsReport:
    """Confidence, accuracy, NLL, Brier, ECE and MCE of predicted class probabilities.

    Sums use ``math.fsum`` so the result does not depend on record order.
    """
    P = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ConfigError("need a non-empty (n, C) probability matrix")
    if t.shape != (P.shape[0],):
        raise ConfigError(f"need {P.shape[0]} targets, got shape {t.shape}")
    if bins < 1:
        raise ConfigError("bins must be positive")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise ConfigError("each probability row must be nonnegative and sum to 1")
    n, C = P.shape
    rows = np.arange(n)
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == t).astype(np.float64)  # argmax picks the lowest index on ties
    onehot = np.zeros_like(P)
    onehot[rows, t] = 1.0

    nll = _fmean(-np.log(np.maximum(P[rows, t], PROB_FLOOR)))
    brier = _fmean(math.fsum(r) for r in (P - onehot) ** 2)

    bin_idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    ece_terms, gaps = [], []
    for b in range(bins):
        mask = bin_idx == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        gap = abs(_fmean(correct[mask]) - _fmean(conf[mask]))
        gaps.append(gap)
        ece_terms.append(nb / n * gap)
    return MetricsReport(
        confidence=_fmean(conf),
        accuracy=_fmean(correct),
        nll=nll,
        brier=brier,
        ece=math.fsum(ece_terms),
        mce=max(gaps),
        bin_count=bins,
        n=n,
    )


def auroc(scores_in, scores_out) -> float:
    """Probability that a random OOD score exceeds a random in-distribution one (ties count 1/2)."""
    a = np.sort(np.asarray(scores_in, dtype=np.float64).ravel())
    b = np.asarray(scores_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigError("AUROC needs non-empty score lists")
    below = np.searchsorted(a, b, side="left")
    at_or_below = np.searchsorted(a, b, side="right")
    wins = math.fsum(below) + 0.5 * math.fsum(at_or_below - below)
    return wins / (a.size * b.size)


def regression_band_stats(means, variances, targets) -> tuple[float, float]:
    """RMSE of the predictive mean and mean predictive standard deviation."""
    m = np.asarray(means, dtype=np.float64).ravel()
    v = np.asarray(variances, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if not (m.size == v.size == y.size) or m.size == 0:
        raise ConfigError("means, variances and targets must be equal-length and non-empty")
    rmse = math.sqrt(_fmean((m - y) ** 2))
    return rmse, _fmean(np.sqrt(np.clip(v, 0.0, None)))
