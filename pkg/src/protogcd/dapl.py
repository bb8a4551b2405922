"""Dual-level adaptive pseudo-labeling.

Level 1 adapts across samples: a confidence built from the gap between the
two largest prototype similarities decides hard (one-hot) versus sharpened
soft targets.  Level 2 adapts across epochs: the fraction of unlabeled
samples given hard targets ramps linearly, which fixes the confidence
threshold implicitly as an order statistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ModelParams, embed_batch
from .sphere import tempered_softmax, tempered_softmax_rows


@dataclass(frozen=True)
class PseudoLabel:
    """Target distribution for one sample: one-hot iff confidence >= delta."""

    target: np.ndarray
    is_hard: bool
    confidence: float


@dataclass(frozen=True)
class DaplEpochState:
    """Per-epoch pseudo-labeling state over the unlabeled pool."""

    epoch: int
    hard_ratio: float
    threshold: float
    unlabeled_confidences: np.ndarray

    @property
    def n_hard(self) -> int:
        return int(np.count_nonzero(self.unlabeled_confidences >= self.threshold))


def proto_confidence(logits: np.ndarray, tau_conf: float) -> float:
    """exp((top1 - top2) / tau_conf) over the two largest logits; always >= 1."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError("confidence needs at least 2 classes")
    if tau_conf <= 0:
        raise ValueError("tau_conf must be positive")
    top2 = np.partition(logits, -2)[-2:]
    return float(np.exp((top2[1] - top2[0]) / tau_conf))


def proto_confidence_batch(logits: np.ndarray, tau_conf: float) -> np.ndarray:
    """Row-wise :func:`proto_confidence` for an n x K logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError("confidence needs at least 2 classes")
    if tau_conf <= 0:
        raise ValueError("tau_conf must be positive")
    top2 = np.partition(logits, -2, axis=-1)[..., -2:]
    return np.exp((top2[..., 1] - top2[..., 0]) / tau_conf)


def ramp_ratio(epoch: int, e_ramp: int) -> float:
    """Linear hard-label ramp: epoch/e_ramp clipped to [0, 1]; e_ramp=0 -> 1."""
    if e_ramp < 0:
        raise ValueError("e_ramp must be nonnegative")
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if e_ramp == 0:
        return 1.0
    return min(epoch / e_ramp, 1.0)


def epoch_threshold(unlabeled_confidences: np.ndarray, r: float) -> float:
    """Implicit confidence threshold for hard labels at ratio r.

    r=0 -> +inf (no hard labels); r=1 -> 1 (confidence is always >= 1, so
    everything is hard); otherwise the floor(n*r)-th highest confidence.
    Ties at the threshold are all accepted as hard.
    """
    if not (0.0 <= r <= 1.0):
        raise ValueError("ratio must lie in [0, 1]")
    if r == 0.0:
        return np.inf
    if r == 1.0:
        return 1.0
    conf = np.asarray(unlabeled_confidences, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("empty confidence list with r > 0")
    m = int(np.floor(conf.size * r))
    if m == 0:
        return np.inf
    return float(np.sort(conf)[::-1][m - 1])


def assign_pseudo_label(logits: np.ndarray, delta: float, tau_base: float,
                        tau_sharp: float, tau_conf: float) -> PseudoLabel:
    """One-hot at the argmax when confidence >= delta, else the sharpened
    softmax at tau_sharp (strictly sharper than the tau_base prediction)."""
    if not (tau_base > tau_sharp > 0):
        raise ConfigError(
            f"need tau_base > tau_sharp > 0, got {tau_base} vs {tau_sharp}")
    logits = np.asarray(logits, dtype=np.float64)
    conf = proto_confidence(logits, tau_conf)
    if conf >= delta:
        target = np.zeros(logits.shape[-1])
        target[int(np.argmax(logits))] = 1.0
        return PseudoLabel(target=target, is_hard=True, confidence=conf)
    return PseudoLabel(target=tempered_softmax(logits, tau_sharp),
                       is_hard=False, confidence=conf)


def assign_targets_batch(logits: np.ndarray, delta: float, tau_base: float,
                         tau_sharp: float,
                         tau_conf: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`assign_pseudo_label`; returns (targets, hard, conf)."""
    if not (tau_base > tau_sharp > 0):
        raise ConfigError(
            f"need tau_base > tau_sharp > 0, got {tau_base} vs {tau_sharp}")
    logits = np.asarray(logits, dtype=np.float64)
    conf = proto_confidence_batch(logits, tau_conf)
    hard = conf >= delta
    targets = tempered_softmax_rows(logits, tau_sharp)
    if np.any(hard):
        idx = np.flatnonzero(hard)
        targets[idx] = 0.0
        targets[idx, np.argmax(logits[idx], axis=1)] = 1.0
    return targets, hard, conf


def build_epoch_state(params: ModelParams, unlabeled_features: np.ndarray,
                      epoch: int, e_ramp: int, tau_conf: float) -> DaplEpochState:
    """Rank current-model confidences over the whole unlabeled pool and fix
    the epoch's implicit threshold."""
    r = ramp_ratio(epoch, e_ramp)
    z = embed_batch(params, unlabeled_features)
    conf = proto_confidence_batch(z @ params.prototypes.T, tau_conf)
    delta = epoch_threshold(conf, r)
    return DaplEpochState(epoch=epoch, hard_ratio=r, threshold=delta,
                          unlabeled_confidences=conf)
