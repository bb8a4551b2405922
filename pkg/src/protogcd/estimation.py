"""Class-number estimation: the prototype score (labeled accuracy times
labeled/unlabeled centroid agreement) maximized over candidate counts of
new classes by a binary search over short probe trainings.

Each probe trains a fresh model for a few epochs with K_old + candidate
prototypes; probe seeds derive from (seed, candidate), so a candidate's
score does not depend on the order in which the search visits it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dataset import EmbeddingDataset, split_gcd
from .model import ModelParams, embed_batch
from .sphere import normalize
from .trainer import TrainConfig, train

_STREAM_PROBE = 303
CENTROID_FLOOR = 1e-3


@dataclass(frozen=True)
class ScoreTriple:
    """acc_score x centr_score = proto_score for one candidate new-class count."""

    candidate: int
    acc_score: float
    centr_score: float
    proto_score: float


@dataclass(frozen=True)
class SearchIteration:
    """One binary-search step.  p_a and p_b mirror the bookkeeping variables
    of the search driver; they are recorded but never read."""

    iteration: int
    k_a: int
    k_b: int
    k_c1: int
    k_c2: int
    p_c1: float
    p_c2: float
    p_a: float
    p_b: float


@dataclass(frozen=True)
class EstimateResult:
    estimate: int
    probes: list
    iterations: list
    sweep_estimate: int | None = None


def acc_score(params: ModelParams, dataset: EmbeddingDataset) -> float:
    """Fraction of labeled samples whose argmax posterior is the true label.

    The parametric classifier makes this directly computable; no matching
    is involved.
    """
    labeled_idx, _ = split_gcd(dataset)
    if labeled_idx.size == 0:
        raise ValueError("acc_score needs labeled samples")
    labels = dataset.training_labels()[labeled_idx]
    z = embed_batch(params, dataset.features64()[labeled_idx])
    preds = np.argmax(z @ params.prototypes.T, axis=1)
    return float(np.mean(preds == labels))


def centr_score(params: ModelParams, dataset: EmbeddingDataset) -> float:
    """Product over old classes of the cosine between the labeled centroid
    (ground-truth assignment) and the unlabeled centroid (model-predicted
    assignment).

    An old class with no predicted unlabeled member contributes the floor
    factor 1e-3, as does a negative cosine (a signed product would flip
    meaning with an even number of negative factors).
    """
    labeled_idx, unlabeled_idx = split_gcd(dataset)
    labels = dataset.training_labels()
    feats = dataset.features64()
    z_lab = embed_batch(params, feats[labeled_idx])
    z_unl = (embed_batch(params, feats[unlabeled_idx])
             if unlabeled_idx.size else np.zeros((0, params.d)))
    preds_unl = (np.argmax(z_unl @ params.prototypes.T, axis=1)
                 if unlabeled_idx.size else np.empty(0, dtype=np.int64))

    score = 1.0
    for k in sorted(dataset.old_classes):
        lab_members = z_lab[labels[labeled_idx] == k]
        if lab_members.shape[0] == 0:
            raise ValueError(f"old class {k} has no labeled members")
        lab_mean = lab_members.mean(axis=0)
        if np.linalg.norm(lab_mean) == 0.0:
            raise ValueError(f"zero-vector labeled centroid for class {k}")
        unl_members = z_unl[preds_unl == k]
        if unl_members.shape[0] == 0:
            score *= CENTROID_FLOOR
            continue
        unl_mean = unl_members.mean(axis=0)
        if np.linalg.norm(unl_mean) == 0.0:
            raise ValueError(f"zero-vector unlabeled centroid for class {k}")
        cos = float(normalize(lab_mean) @ normalize(unl_mean))
        score *= CENTROID_FLOOR if cos < 0 else cos
    return score


def proto_score(params: ModelParams, dataset: EmbeddingDataset,
                candidate: int = -1) -> ScoreTriple:
    """Combine the two sub-scores multiplicatively."""
    a = acc_score(params, dataset)
    c = centr_score(params, dataset)
    return ScoreTriple(candidate=candidate, acc_score=a, centr_score=c,
                       proto_score=a * c)


def _probe_seed(seed: int, candidate: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_STREAM_PROBE, candidate))
    return int(ss.generate_state(1)[0])


def make_probe_fn(dataset: EmbeddingDataset, k_old: int, cfg: TrainConfig,
                  probe_epochs: int,
                  criterion: str = "proto") -> Callable[[int], ScoreTriple]:
    """Score one candidate new-class count by training a fresh short model.

    criterion "proto" uses acc x centr; "acc" is the accuracy-only baseline
    driven through the same machinery.
    """
    if criterion not in ("proto", "acc"):
        raise ValueError(f"unknown criterion {criterion!r}")

    def probe(candidate: int) -> ScoreTriple:
        # Fresh per-candidate initialization, but epoch streams (views,
        # shuffles) shared across candidates: paired probes cut the noise
        # in adjacent-score comparisons.  The schedule horizon stays at the
        # full-run value; a probe is a stopped prefix, not a shrunken run.
        probe_cfg = replace(
            cfg,
            epochs=probe_epochs,
            init_seed=_probe_seed(cfg.seed, candidate),
            num_prototypes=k_old + candidate,
            optimizer=replace(cfg.optimizer,
                              total_epochs=max(cfg.optimizer.total_epochs,
                                               probe_epochs)),
        )
        params, _ = train(dataset, probe_cfg)
        triple = proto_score(params, dataset, candidate=candidate)
        if criterion == "acc":
            triple = ScoreTriple(candidate=candidate, acc_score=triple.acc_score,
                                 centr_score=1.0, proto_score=triple.acc_score)
        return triple

    return probe


def binary_search_estimate(score_fn: Callable[[int], ScoreTriple],
                           k_max: int) -> tuple[int, list, list]:
    """Binary search on [0, k_max], comparing adjacent candidates at the
    midpoint and moving toward the larger score.

    Returns (estimate, probed ScoreTriples, iteration records).  Runs at
    most ceil(log2(k_max + 1)) iterations, two probes each.
    """
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    k_a, k_b = 0, k_max
    p_a = p_b = float("nan")
    probes: list[ScoreTriple] = []
    iterations: list[SearchIteration] = []
    i = 0
    while k_a < k_b:
        k_c1 = (k_a + k_b) // 2
        k_c2 = k_c1 + 1
        t1 = score_fn(k_c1)
        t2 = score_fn(k_c2)
        probes.extend([t1, t2])
        if t1.proto_score < t2.proto_score:
            k_a, p_a = k_c2, t2.proto_score
        else:
            k_b, p_b = k_c1, t1.proto_score
        iterations.append(SearchIteration(
            iteration=i, k_a=k_a, k_b=k_b, k_c1=k_c1, k_c2=k_c2,
            p_c1=t1.proto_score, p_c2=t2.proto_score, p_a=p_a, p_b=p_b))
        i += 1
    return k_a, probes, iterations


def sweep_estimate(score_fn: Callable[[int], ScoreTriple],
                   k_max: int) -> tuple[int, list]:
    """Score every candidate in [0, k_max]; returns (argmax, all triples)."""
    triples = [score_fn(c) for c in range(k_max + 1)]
    scores = np.array([t.proto_score for t in triples])
    return int(np.argmax(scores)), triples


def is_unimodal(values: np.ndarray) -> bool:
    """True when the sequence rises (weakly) then falls (weakly)."""
    values = np.asarray(values, dtype=np.float64)
    peak = int(np.argmax(values))
    return (np.all(np.diff(values[:peak + 1]) >= 0)
            and np.all(np.diff(values[peak:]) <= 0))


def estimate_k(dataset: EmbeddingDataset, k_old: int, k_max: int,
               cfg: TrainConfig, probe_epochs: int = 3,
               score_fn: Callable[[int], ScoreTriple] | None = None,
               sweep: bool = False, criterion: str = "proto") -> EstimateResult:
    """Estimate the number of new classes.

    k_max = 0 returns 0 without training.  ``score_fn`` replaces the probe
    trainer (used to test the driver against injected score landscapes).
    With ``sweep`` the exhaustive argmax is computed as well.
    """
    if score_fn is None:
        score_fn = make_probe_fn(dataset, k_old, cfg, probe_epochs, criterion)
    if k_max == 0:
        return EstimateResult(estimate=0, probes=[], iterations=[],
                              sweep_estimate=0 if sweep else None)
    estimate, probes, iterations = binary_search_estimate(score_fn, k_max)
    sweep_answer = None
    if sweep:
        sweep_answer, sweep_probes = sweep_estimate(score_fn, k_max)
        probes = probes + sweep_probes
    return EstimateResult(estimate=estimate, probes=probes,
                          iterations=iterations, sweep_estimate=sweep_answer)
