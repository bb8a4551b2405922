"""Post-hoc out-of-distribution scoring on the trained prototype classifier
and threshold-free detection metrics.

All three scores increase with normality: maximum softmax probability,
maximum prototype similarity (max logit), and the log-sum-exp energy over
temperature-scaled logits.  Metrics treat in-distribution samples as the
positive class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, embed_batch, forward

SCORE_NAMES = ("msp", "mls", "energy")


@dataclass(frozen=True)
class OodReport:
    score_name: str
    fpr95: float
    auroc: float
    aupr_in: float
    n_id: int
    n_ood: int

    def fields(self) -> dict:
        return {"score_name": self.score_name, "fpr95": self.fpr95,
                "auroc": self.auroc, "aupr_in": self.aupr_in,
                "n_id": self.n_id, "n_ood": self.n_ood}


def msp_score(params: ModelParams, x: np.ndarray, tau_base: float) -> float:
    """Maximum softmax probability; in (0, 1]."""
    return float(np.max(forward(params, x, tau_base).posterior))


def mls_score(params: ModelParams, x: np.ndarray) -> float:
    """Maximum prototype similarity (max logit); in [-1, 1]."""
    return float(np.max(forward(params, x, 1.0).logits))


def energy_score(params: ModelParams, x: np.ndarray, tau_base: float) -> float:
    """log-sum-exp of logits / tau_base; higher = more in-distribution."""
    logits = forward(params, x, tau_base).logits / tau_base
    mx = float(np.max(logits))
    return mx + float(np.log(np.sum(np.exp(logits - mx))))


def score_batch(params: ModelParams, features: np.ndarray, score_name: str,
                tau_base: float) -> np.ndarray:
    """Vectorized scores for a feature matrix."""
    logits = embed_batch(params, features) @ params.prototypes.T
    if score_name == "mls":
        return np.max(logits, axis=1)
    scaled = logits / tau_base
    mx = np.max(scaled, axis=1, keepdims=True)
    if score_name == "msp":
        e = np.exp(scaled - mx)
        return np.max(e, axis=1) / np.sum(e, axis=1)
    if score_name == "energy":
        return (mx[:, 0] + np.log(np.sum(np.exp(scaled - mx), axis=1)))
    raise ValueError(f"unknown score {score_name!r}; expected one of {SCORE_NAMES}")


def _validate_sides(id_scores: np.ndarray, ood_scores: np.ndarray):
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be nonempty")
    return a, b


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability that an ID sample scores above an OOD sample, ties
    counting one half (Mann-Whitney statistic)."""
    a, b = _validate_sides(id_scores, ood_scores)
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    ranks[order] = np.arange(1, pooled.size + 1)
    # average ranks over ties
    vals, inverse, counts = np.unique(pooled, return_inverse=True,
                                      return_counts=True)
    sums = np.zeros(vals.size)
    np.add.at(sums, inverse, ranks)
    ranks = (sums / counts)[inverse]
    u = np.sum(ranks[: a.size]) - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray,
               tpr: float = 0.95) -> float:
    """Fraction of OOD samples at or above the loosest threshold that
    accepts at least ceil(tpr * n_id) ID samples."""
    a, b = _validate_sides(id_scores, ood_scores)
    if not (0.0 < tpr <= 1.0):
        raise ValueError("tpr must lie in (0, 1]")
    m = int(np.ceil(tpr * a.size))
    threshold = np.sort(a)[::-1][m - 1]
    return float(np.mean(b >= threshold))


def aupr_in(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Area under the precision-recall curve with ID as the positive class,
    step-interpolated over thresholds at the observed scores."""
    a, b = _validate_sides(id_scores, ood_scores)
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    area = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = int(np.count_nonzero(a >= t))
        fp = int(np.count_nonzero(b >= t))
        if tp + fp == 0:
            continue
        precision = tp / (tp + fp)
        recall = tp / a.size
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def ood_report(params: ModelParams, id_features: np.ndarray,
               ood_features: np.ndarray, score_name: str,
               tau_base: float) -> OodReport:
    """Score both sides and compute the three detection metrics."""
    id_s = score_batch(params, id_features, score_name, tau_base)
    ood_s = score_batch(params, ood_features, score_name, tau_base)
    return OodReport(
        score_name=score_name,
        fpr95=fpr_at_tpr(id_s, ood_s, 0.95),
        auroc=auroc(id_s, ood_s),
        aupr_in=aupr_in(id_s, ood_s),
        n_id=int(id_s.size),
        n_ood=int(ood_s.size),
    )
