"""Loss terms as value-plus-gradient computations, combinable into the
overall training objective.

Each elementary loss returns its value together with the gradient with
respect to its immediate inputs (projections, posteriors, or prototypes).
:func:`total_objective` composes them over a two-view batch and chains the
gradients back to the ModelParams arrays.  Pseudo-label targets are
constants: no gradient flows through them.

Every analytic gradient here is contract-checked against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import UndefinedLossError
from .model import ModelParams

if TYPE_CHECKING:  # pragma: no cover
    from .trainer import TrainConfig

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    """Unweighted term values, the weighted total, and parameter gradients."""

    con_unsup: float
    con_sup: float
    dapl: float
    sup_ce: float
    entropy_reg: float
    sep_reg: float
    total: float
    gradients: ModelParams

    def weighted_total(self, cfg) -> float:
        """Recompute the weighted sum (bookkeeping identity for tests)."""
        lam = cfg.lambda_sup
        dapl_w = (1.0 - lam) if cfg.use_dapl else 0.0
        return ((1.0 - lam) * self.con_unsup + lam * self.con_sup
                + dapl_w * self.dapl + lam * self.sup_ce
                + cfg.lambda_entropy * self.entropy_reg
                + cfg.lambda_sep * self.sep_reg)


@dataclass(frozen=True)
class TrainingBatch:
    """Two views per sample plus training-visible labels (-1 = unlabeled)."""

    view_a: np.ndarray
    view_b: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("views must have identical shapes")
        if self.labels.shape != (self.view_a.shape[0],):
            raise ValueError("one label per sample required")

    @property
    def size(self) -> int:
        return self.view_a.shape[0]

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


@dataclass(frozen=True)
class BatchTargets:
    """Per-view pseudo-label targets (constants) and their hard flags."""

    q_a: np.ndarray
    q_b: np.ndarray
    hard_a: np.ndarray
    hard_b: np.ndarray


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def _cross_entropy_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -np.sum(q * _safe_log(p), axis=-1)


def _cross_entropy_grad(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d/dp of -sum q log(max(p, floor)); zero below the floor."""
    g = np.zeros_like(p)
    m = p > LOG_FLOOR
    g[m] = -q[m] / p[m]
    return g


def _masked_row_lse(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a matrix whose diagonal is -inf."""
    mx = np.max(scores, axis=1, keepdims=True)
    return (mx + np.log(np.sum(np.exp(scores - mx), axis=1, keepdims=True)))[:, 0]


def _pairwise_pool(h: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Scaled similarity matrix with -inf diagonal and its row softmax."""
    s = (h @ h.T) / tau
    np.fill_diagonal(s, -np.inf)
    lse = _masked_row_lse(s)
    w = np.exp(s - lse[:, None])
    np.fill_diagonal(w, 0.0)
    return s, w


def _pool_backward(g_scores: np.ndarray, h: np.ndarray, tau: float) -> np.ndarray:
    """Chain dL/dS (S = h h^T / tau, diagonal unused) back to dL/dh."""
    return (g_scores + g_scores.T) @ h / tau


def unsup_contrastive(h_a: np.ndarray, h_b: np.ndarray,
                      tau_c: float) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Two-view InfoNCE over the combined pool.

    Every one of the 2B pool items is an anchor; its positive is the other
    view of the same sample; the denominator runs over the 2B-1 other pool
    items.  Returns the mean per-anchor loss and gradients for both views.
    """
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape or h_a.ndim != 2:
        raise ValueError("views must be equal-shape 2-D arrays")
    b = h_a.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs batch size >= 2 (no negatives)")
    pool = np.vstack([h_a, h_b])
    n = 2 * b
    pos = (np.arange(n) + b) % n

    s, w = _pairwise_pool(pool, tau_c)
    lse = _masked_row_lse(s)
    value = float(np.mean(lse - s[np.arange(n), pos]))

    g_s = w.copy()
    g_s[np.arange(n), pos] -= 1.0
    g_s /= n
    g_pool = _pool_backward(g_s, pool, tau_c)
    return value, (g_pool[:b], g_pool[b:])


def sup_contrastive(h: np.ndarray, labels: np.ndarray,
                    tau_c: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over a labeled pool.

    Anchors average -log odds over their positive set (same label, other
    index); the denominator runs over all other pool items.  Anchors with
    no positives are skipped; if none has a positive the loss is undefined.
    """
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels)
    n = h.shape[0]
    if n < 2:
        raise ValueError("supervised contrastive loss needs at least 2 samples")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    n_pos = same.sum(axis=1)
    counted = n_pos > 0
    n_counted = int(np.count_nonzero(counted))
    if n_counted == 0:
        raise UndefinedLossError("no anchor has a positive pair")

    s, w = _pairwise_pool(h, tau_c)
    lse = _masked_row_lse(s)
    per_anchor = np.zeros(n)
    per_anchor[counted] = (
        lse[counted]
        - np.sum(np.where(same, s, 0.0), axis=1)[counted] / n_pos[counted]
    )
    value = float(np.sum(per_anchor) / n_counted)

    t = np.zeros_like(w)
    t[counted] = same[counted] / n_pos[counted, None]
    g_s = np.where(counted[:, None], w, 0.0) - t
    g_s /= n_counted
    return value, _pool_backward(g_s, h, tau_c)


def dapl_loss(p_a: np.ndarray, p_b: np.ndarray, q_a: np.ndarray,
              q_b: np.ndarray) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Cross-view pseudo-label loss: each view's target teaches the other
    view's prediction.  Targets are constants."""
    p_a, p_b = np.asarray(p_a, dtype=np.float64), np.asarray(p_b, dtype=np.float64)
    q_a, q_b = np.asarray(q_a, dtype=np.float64), np.asarray(q_b, dtype=np.float64)
    if p_a.shape != q_a.shape or p_b.shape != q_b.shape or p_a.shape != p_b.shape:
        raise ValueError("posterior/target shapes disagree")
    b = p_a.shape[0]
    value = float(np.sum(_cross_entropy_rows(q_b, p_a)
                         + _cross_entropy_rows(q_a, p_b)) / (2 * b))
    g_a = _cross_entropy_grad(q_b, p_a) / (2 * b)
    g_b = _cross_entropy_grad(q_a, p_b) / (2 * b)
    return value, (g_a, g_b)


def supervised_ce(p_a: np.ndarray, p_b: np.ndarray,
                  y_onehot: np.ndarray) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Ground-truth cross-entropy over both views of labeled samples."""
    p_a, p_b = np.asarray(p_a, dtype=np.float64), np.asarray(p_b, dtype=np.float64)
    y = np.asarray(y_onehot, dtype=np.float64)
    if p_a.shape != y.shape or p_b.shape != y.shape:
        raise ValueError("posterior/label shapes disagree")
    rows_ok = (np.abs(y.sum(axis=1) - 1.0) < 1e-9) & (y.max(axis=1) == 1.0)
    if not np.all(rows_ok):
        raise ValueError("supervised loss received a non-one-hot (unlabeled?) row")
    b = y.shape[0]
    value = float(np.sum(_cross_entropy_rows(y, p_a)
                         + _cross_entropy_rows(y, p_b)) / (2 * b))
    g_a = _cross_entropy_grad(y, p_a) / (2 * b)
    g_b = _cross_entropy_grad(y, p_b) / (2 * b)
    return value, (g_a, g_b)


def entropy_reg(p_a: np.ndarray,
                p_b: np.ndarray) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Negated entropy of the marginal posterior over both views.

    Minimizing this maximizes the marginal entropy; the value lies in
    [-log K, 0].
    """
    p_a, p_b = np.asarray(p_a, dtype=np.float64), np.asarray(p_b, dtype=np.float64)
    if p_a.shape != p_b.shape or p_a.ndim != 2 or p_a.shape[0] < 1:
        raise ValueError("need equal-shape nonempty posterior matrices")
    b = p_a.shape[0]
    pbar = (p_a.sum(axis=0) + p_b.sum(axis=0)) / (2 * b)
    value = float(np.sum(pbar * _safe_log(pbar)))
    d_pbar = np.where(pbar > LOG_FLOOR, _safe_log(pbar) + 1.0, np.log(LOG_FLOOR))
    g = np.tile(d_pbar / (2 * b), (b, 1))
    return value, (g, g.copy())


def separation_reg(prototypes: np.ndarray,
                   tau_sep: float) -> tuple[float, np.ndarray]:
    """Mean log-mean-exp of pairwise prototype similarities.

    Minimizing pushes prototypes apart; the value lies in
    [-1/tau_sep, 1/tau_sep] for unit rows.
    """
    if tau_sep <= 0:
        raise ValueError("tau_sep must be positive")
    m = np.asarray(prototypes, dtype=np.float64)
    k = m.shape[0]
    if k < 2:
        raise ValueError("separation needs at least 2 prototypes")
    s, w = _pairwise_pool(m, tau_sep)
    lse = _masked_row_lse(s)
    value = float(np.mean(lse) - np.log(k - 1))
    g_s = w / k
    return value, _pool_backward(g_s, m, tau_sep)


def _normalize_rows_backward(raw: np.ndarray, unit: np.ndarray,
                             g_unit: np.ndarray) -> np.ndarray:
    """Backprop through row normalization unit = raw/||raw||."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return (g_unit - unit * np.sum(unit * g_unit, axis=1, keepdims=True)) / norms


def _softmax_backward(p: np.ndarray, g_p: np.ndarray, tau: float) -> np.ndarray:
    """Backprop through p = softmax(logits/tau), rows independent."""
    return p * (g_p - np.sum(p * g_p, axis=1, keepdims=True)) / tau


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass(frozen=True)
class BatchForward:
    """Cached intermediates of one two-view forward pass."""

    raw_z: tuple[np.ndarray, np.ndarray]
    z: tuple[np.ndarray, np.ndarray]
    raw_h: tuple[np.ndarray, np.ndarray]
    h: tuple[np.ndarray, np.ndarray]
    logits: tuple[np.ndarray, np.ndarray]
    posteriors: tuple[np.ndarray, np.ndarray]


def batch_forward(params: ModelParams, batch: TrainingBatch,
                  tau_base: float) -> BatchForward:
    raw_z, z, raw_h, h, logits, post = [], [], [], [], [], []
    for x in (batch.view_a, batch.view_b):
        x = np.asarray(x, dtype=np.float64)
        rz = x @ params.adapter
        norms = np.linalg.norm(rz, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("adapter maps an input to the zero vector")
        zz = rz / norms
        rh = zz @ params.projection
        hh = rh / np.linalg.norm(rh, axis=1, keepdims=True)
        lg = zz @ params.prototypes.T
        shifted = lg / tau_base
        shifted -= shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        pp = e / e.sum(axis=1, keepdims=True)
        raw_z.append(rz); z.append(zz); raw_h.append(rh); h.append(hh)
        logits.append(lg); post.append(pp)
    return BatchForward(tuple(raw_z), tuple(z), tuple(raw_h), tuple(h),
                        tuple(logits), tuple(post))


def total_objective(params: ModelParams, batch: TrainingBatch,
                    targets: BatchTargets, cfg: "TrainConfig",
                    fwd: BatchForward | None = None) -> LossBreakdown:
    """Weighted sum of all loss terms with the gradient w.r.t. ModelParams.

    ``targets`` must be precomputed constants (stop-gradient); supervised
    terms use only the labeled members of the batch and contribute zero
    when the batch has none.  ``fwd`` may pass in a forward pass already
    computed for this (params, batch) pair.
    """
    if fwd is None:
        fwd = batch_forward(params, batch, cfg.tau_base)
    b = batch.size
    k = params.n_classes
    lab = batch.labeled_indices
    lam = cfg.lambda_sup

    g_h = [np.zeros_like(fwd.h[0]), np.zeros_like(fwd.h[1])]
    g_p = [np.zeros_like(fwd.posteriors[0]), np.zeros_like(fwd.posteriors[1])]

    v_con_u, (gu_a, gu_b) = unsup_contrastive(fwd.h[0], fwd.h[1], cfg.tau_c)
    g_h[0] += (1.0 - lam) * gu_a
    g_h[1] += (1.0 - lam) * gu_b

    v_con_l = 0.0
    if lab.size >= 1:
        pool = np.vstack([fwd.h[0][lab], fwd.h[1][lab]])
        pool_labels = np.concatenate([batch.labels[lab], batch.labels[lab]])
        v_con_l, g_pool = sup_contrastive(pool, pool_labels, cfg.tau_c)
        g_h[0][lab] += lam * g_pool[: lab.size]
        g_h[1][lab] += lam * g_pool[lab.size:]

    v_dapl = 0.0
    if cfg.use_dapl:
        v_dapl, (gd_a, gd_b) = dapl_loss(fwd.posteriors[0], fwd.posteriors[1],
                                         targets.q_a, targets.q_b)
        g_p[0] += (1.0 - lam) * gd_a
        g_p[1] += (1.0 - lam) * gd_b

    v_sup = 0.0
    if lab.size >= 1:
        y = one_hot(batch.labels[lab], k)
        v_sup, (gs_a, gs_b) = supervised_ce(fwd.posteriors[0][lab],
                                            fwd.posteriors[1][lab], y)
        g_p[0][lab] += lam * gs_a
        g_p[1][lab] += lam * gs_b

    v_ent, (ge_a, ge_b) = entropy_reg(fwd.posteriors[0], fwd.posteriors[1])
    g_p[0] += cfg.lambda_entropy * ge_a
    g_p[1] += cfg.lambda_entropy * ge_b

    v_sep, g_mu_sep = separation_reg(params.prototypes, cfg.tau_sep)

    total = ((1.0 - lam) * v_con_u + lam * v_con_l
             + ((1.0 - lam) * v_dapl if cfg.use_dapl else 0.0) + lam * v_sup
             + cfg.lambda_entropy * v_ent + cfg.lambda_sep * v_sep)

    # Backward chain: posteriors -> logits -> (features, prototypes);
    # projections -> (projection matrix, features); features -> adapter.
    d_adapter = np.zeros_like(params.adapter)
    d_prototypes = cfg.lambda_sep * g_mu_sep
    d_projection = np.zeros_like(params.projection)
    views = (batch.view_a, batch.view_b)
    for v in range(2):
        g_logits = _softmax_backward(fwd.posteriors[v], g_p[v], cfg.tau_base)
        d_prototypes += g_logits.T @ fwd.z[v]
        g_z = g_logits @ params.prototypes

        g_raw_h = _normalize_rows_backward(fwd.raw_h[v], fwd.h[v], g_h[v])
        d_projection += fwd.z[v].T @ g_raw_h
        g_z += g_raw_h @ params.projection.T

        g_raw_z = _normalize_rows_backward(fwd.raw_z[v], fwd.z[v], g_z)
        d_adapter += np.asarray(views[v], dtype=np.float64).T @ g_raw_z

    return LossBreakdown(
        con_unsup=v_con_u, con_sup=v_con_l, dapl=v_dapl, sup_ce=v_sup,
        entropy_reg=v_ent, sep_reg=v_sep, total=total,
        gradients=ModelParams(d_adapter, d_prototypes, d_projection),
    )
