"""Clustering evaluation: Hungarian-matched accuracy (All/Old/New), cluster
geometry metrics, and typicality-ranked retrieval.

The cluster-to-class permutation is computed once on all evaluated samples;
Old and New accuracies reuse that single permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import EmbeddingDataset
from .model import ModelParams, embed_batch, predict_batch
from .sphere import normalize


@dataclass(frozen=True)
class AccReport:
    """All/Old/New clustering accuracy under one shared permutation."""

    acc_all: float
    acc_old: float
    acc_new: float
    permutation: np.ndarray  # permutation[prediction id] = matched class id


@dataclass(frozen=True)
class EvalReport:
    acc_all: float
    acc_old: float
    acc_new: float
    compactness: float
    separation: float

    def fields(self) -> dict:
        return {"acc_all": self.acc_all, "acc_old": self.acc_old,
                "acc_new": self.acc_new, "compactness": self.compactness,
                "separation": self.separation}


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of a square matrix; returns the column chosen
    for each row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=np.int64)
    assignment[rows] = cols
    return assignment


def clustering_accuracy(predictions: np.ndarray, true_labels: np.ndarray,
                        old_classes) -> AccReport:
    """Hungarian-matched accuracy over all samples, then Old/New restricted
    to ground-truth old/new samples under the same matching.

    Prediction and class id ranges may differ (estimated-K mode); the
    contingency matrix is zero-padded to square, so unmatched ground-truth
    classes score zero.  An empty Old or New subset yields NaN for that
    entry.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if predictions.size == 0 or predictions.shape != true_labels.shape:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    old = frozenset(int(c) for c in old_classes)
    size = int(max(predictions.max(), true_labels.max())) + 1
    contingency = np.zeros((size, size), dtype=np.int64)
    np.add.at(contingency, (predictions, true_labels), 1)
    perm = hungarian(-contingency.astype(np.float64))

    matched = perm[predictions] == true_labels
    old_mask = np.isin(true_labels, sorted(old))
    new_mask = ~old_mask

    def _frac(mask: np.ndarray) -> float:
        if not np.any(mask):
            return float("nan")
        return float(np.mean(matched[mask]))

    return AccReport(
        acc_all=float(np.mean(matched)),
        acc_old=_frac(old_mask),
        acc_new=_frac(new_mask),
        permutation=perm,
    )


def _class_means(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Normalized mean feature per class present in ``labels``."""
    means = []
    for k in np.unique(labels):
        members = features[labels == k]
        mean = members.mean(axis=0)
        if np.linalg.norm(mean) == 0.0:
            raise ValueError(f"class {k} has a zero mean feature (degenerate centroid)")
        means.append(normalize(mean))
    return np.vstack(means)


def compactness(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of the mean cosine between members and the
    normalized class mean; higher is tighter, at most 1."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = []
    for k in np.unique(labels):
        members = features[labels == k]
        mean = members.mean(axis=0)
        if np.linalg.norm(mean) == 0.0:
            raise ValueError(f"class {k} has a zero mean feature (degenerate centroid)")
        per_class.append(float(np.mean(members @ normalize(mean))))
    return float(np.mean(per_class))


def separation_metric(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean pairwise cosine between normalized class means; lower is better."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("separation needs at least 2 classes")
    means = _class_means(features, labels)
    k = means.shape[0]
    sims = means @ means.T
    return float((sims.sum() - np.trace(sims)) / (k * (k - 1)))


def typicality_rank(params: ModelParams, dataset: EmbeddingDataset,
                    class_id: int, top_k: int,
                    use_predictions: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``top_k`` most and least typical members of a class,
    ranked by cosine to the class prototype.

    Membership is by predicted label when ``use_predictions`` else by
    ground-truth label (an evaluation-only read).
    """
    z = embed_batch(params, dataset.features64())
    if use_predictions:
        labels = np.argmax(z @ params.prototypes.T, axis=1)
    else:
        labels = dataset.eval_labels()
    members = np.flatnonzero(labels == class_id)
    if members.size == 0:
        raise ValueError(f"class {class_id} has no members")
    if members.size < top_k:
        raise ValueError(
            f"class {class_id} has {members.size} members, fewer than top_k={top_k}")
    typicality = z[members] @ params.prototypes[class_id]
    order = members[np.argsort(-typicality, kind="stable")]
    return order[:top_k], order[-top_k:][::-1]


def evaluate(params: ModelParams, dataset: EmbeddingDataset,
             indices: np.ndarray | None = None) -> EvalReport:
    """Accuracy and cluster-geometry report on a dataset (or an index subset,
    e.g. the unlabeled pool for transductive evaluation)."""
    feats = dataset.features64()
    labels = dataset.eval_labels()
    if indices is not None:
        feats = feats[indices]
        labels = labels[indices]
    preds = predict_batch(params, feats)
    acc = clustering_accuracy(preds, labels, dataset.old_classes)
    z = embed_batch(params, feats)
    return EvalReport(
        acc_all=acc.acc_all, acc_old=acc.acc_old, acc_new=acc.acc_new,
        compactness=compactness(z, labels),
        separation=separation_metric(z, labels),
    )
