"""Training orchestration: per-epoch pseudo-label state refresh, view
generation, batched objective evaluation, optimizer steps, and history.

Training never reads ground-truth labels of unlabeled samples: all label
access goes through ``EmbeddingDataset.training_labels``, which masks them.
Runs are bit-reproducible given (seed, config, dataset); per-epoch random
streams are derived from the seed with fixed spawn keys, so epoch e always
sees the same noise regardless of how the epochs are driven.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dapl import DaplEpochState, assign_targets_batch, build_epoch_state, ramp_ratio
from .dataset import EmbeddingDataset, make_view_arrays, split_gcd
from .errors import ConfigError, NonFiniteError
from .evaluation import clustering_accuracy
from .model import ModelParams, embed_batch, init_params, predict_batch
from .objectives import BatchTargets, TrainingBatch, batch_forward, total_objective
from .optimizer import OptimizerConfig, SgdOptimizer, cosine_lr
from .sphere import normalize_rows

_STREAM_INIT = 101
_STREAM_EPOCH = 202


@dataclass
class TrainConfig:
    """All temperatures, loss weights, and schedule constants.

    Defaults follow the reference hyper-parameter table: lambda_sup 0.35,
    lambda_entropy 2, lambda_sep 0.1, tau_c 0.07, tau_base 0.1,
    tau_sharp 0.05, tau_sep 0.1, 100 ramp epochs, 200 training epochs,
    batch size 128.
    """

    lambda_sup: float = 0.35
    lambda_entropy: float = 2.0
    lambda_sep: float = 0.1
    tau_c: float = 0.07
    tau_base: float = 0.1
    tau_sharp: float = 0.05
    tau_sep: float = 0.1
    tau_conf: float | None = None  # None -> tau_sharp
    e_ramp: int = 100
    epochs: int = 200
    batch_size: int = 128
    view_sigma: float = 0.05
    seed: int = 0
    init_seed: int | None = None  # None -> seed; lets probe models share epoch streams
    use_dapl: bool = True
    warm_start: bool = False
    select_best: bool = False
    feature_dim: int | None = None  # None -> input dimension
    projection_dim: int = 32
    adapter_strategy: str = "identity"
    num_prototypes: int | None = None  # None -> dataset class count
    optimizer: OptimizerConfig | None = None

    def __post_init__(self):
        for name in ("tau_c", "tau_base", "tau_sharp", "tau_sep"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.tau_conf is None:
            self.tau_conf = self.tau_sharp
        if self.tau_conf <= 0:
            raise ConfigError("tau_conf must be positive")
        if not self.tau_base > self.tau_sharp:
            raise ConfigError("need tau_base > tau_sharp (sharpening contract)")
        if not (0.0 <= self.lambda_sup <= 1.0):
            raise ConfigError("lambda_sup must lie in [0, 1]")
        if self.lambda_entropy < 0 or self.lambda_sep < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.e_ramp < 0 or self.epochs < 0:
            raise ConfigError("e_ramp and epochs must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.view_sigma < 0:
            raise ConfigError("view_sigma must be nonnegative")
        if self.optimizer is None:
            self.optimizer = OptimizerConfig(total_epochs=self.epochs)


@dataclass
class EpochRecord:
    """One completed epoch: losses by term, DAPL diagnostics, learning rate."""

    epoch: int
    lr: float
    total: float
    con_unsup: float
    con_sup: float
    dapl: float
    sup_ce: float
    entropy_reg: float
    sep_reg: float
    hard_ratio: float
    delta: float
    n_hard: int
    mean_confidence: float
    val_acc: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


LOG_FIELDS = ("epoch", "lr", "total", "con_unsup", "con_sup", "dapl", "sup_ce",
              "entropy_reg", "sep_reg", "hard_ratio", "delta", "n_hard",
              "mean_confidence", "val_acc")


def format_log_line(record: EpochRecord) -> str:
    parts = []
    for name in LOG_FIELDS:
        v = getattr(record, name)
        if v is None:
            parts.append("")
        elif isinstance(v, (int, np.integer)):
            parts.append(str(int(v)))
        else:
            parts.append(format(float(v), ".10g"))
    return "\t".join(parts)


def append_log_line(path: Path, record: EpochRecord) -> None:
    """Append one epoch line to the training log, writing a header first."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as f:
        if new:
            f.write("\t".join(LOG_FIELDS) + "\n")
        f.write(format_log_line(record) + "\n")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_STREAM_EPOCH, epoch)))


def _partition(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive slices covering every index once; a trailing singleton is
    folded into the previous batch so contrastive terms keep a negative."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) >= 2 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _warm_start_prototypes(params: ModelParams, dataset: EmbeddingDataset) -> None:
    """Move old-class prototypes to the normalized labeled centroids."""
    labels = dataset.training_labels()
    z = embed_batch(params, dataset.features64())
    for k in sorted(dataset.old_classes):
        members = z[labels == k]
        if members.shape[0]:
            params.prototypes[k] = normalize_rows(members.mean(axis=0)[None, :])[0]


def _empty_pool_state(epoch: int, e_ramp: int) -> DaplEpochState:
    r = ramp_ratio(epoch, e_ramp)
    return DaplEpochState(epoch=epoch, hard_ratio=r,
                          threshold=1.0 if r == 1.0 else np.inf,
                          unlabeled_confidences=np.empty(0))


def train_epoch(params: ModelParams, dataset: EmbeddingDataset, epoch: int,
                cfg: TrainConfig, rng: np.random.Generator,
                optimizer: SgdOptimizer | None = None
                ) -> tuple[ModelParams, EpochRecord]:
    """One epoch: refresh DAPL state, shuffle, batch, step.

    Exposed for step-level testing; ``train`` threads one optimizer through
    all epochs so momentum persists.
    """
    if optimizer is None:
        optimizer = SgdOptimizer(cfg.optimizer)
    feats = dataset.features64()
    _, unlabeled_idx = split_gcd(dataset)
    if unlabeled_idx.size:
        state = build_epoch_state(params, feats[unlabeled_idx], epoch,
                                  cfg.e_ramp, cfg.tau_conf)
    else:
        state = _empty_pool_state(epoch, cfg.e_ramp)

    lr = cosine_lr(epoch, cfg.optimizer)
    view_a, view_b = make_view_arrays(feats, cfg.view_sigma, rng)
    labels = dataset.training_labels()
    order = rng.permutation(len(dataset))
    batches = _partition(order, cfg.batch_size)

    sums = np.zeros(7)
    n_seen = 0
    for bi, idx in enumerate(batches):
        batch = TrainingBatch(view_a[idx], view_b[idx], labels[idx])
        fwd = batch_forward(params, batch, cfg.tau_base)
        q_a, hard_a, _ = assign_targets_batch(fwd.logits[0], state.threshold,
                                              cfg.tau_base, cfg.tau_sharp,
                                              cfg.tau_conf)
        q_b, hard_b, _ = assign_targets_batch(fwd.logits[1], state.threshold,
                                              cfg.tau_base, cfg.tau_sharp,
                                              cfg.tau_conf)
        targets = BatchTargets(q_a, q_b, hard_a, hard_b)
        breakdown = total_objective(params, batch, targets, cfg, fwd=fwd)
        if not np.isfinite(breakdown.total):
            raise NonFiniteError(
                f"non-finite loss {breakdown.total} at epoch {epoch} batch {bi}")
        optimizer.step(params, breakdown.gradients, lr)
        w = len(idx)
        sums += w * np.array([breakdown.total, breakdown.con_unsup,
                              breakdown.con_sup, breakdown.dapl,
                              breakdown.sup_ce, breakdown.entropy_reg,
                              breakdown.sep_reg])
        n_seen += w

    means = sums / n_seen
    n_unlab = int(unlabeled_idx.size)
    record = EpochRecord(
        epoch=epoch, lr=lr, total=means[0], con_unsup=means[1], con_sup=means[2],
        dapl=means[3], sup_ce=means[4], entropy_reg=means[5], sep_reg=means[6],
        hard_ratio=(state.n_hard / n_unlab) if n_unlab else 0.0,
        delta=float(state.threshold), n_hard=state.n_hard,
        mean_confidence=(float(np.mean(state.unlabeled_confidences))
                         if n_unlab else 0.0),
    )
    return params, record


def _validation_accuracy(params: ModelParams, validation: EmbeddingDataset) -> float:
    preds = predict_batch(params, validation.features64())
    report = clustering_accuracy(preds, validation.eval_labels(),
                                 validation.old_classes)
    return report.acc_all


def train(dataset: EmbeddingDataset, cfg: TrainConfig,
          validation: EmbeddingDataset | None = None,
          log_path: Path | None = None) -> tuple[ModelParams, TrainHistory]:
    """Train a model end-to-end; returns final params and per-epoch history.

    With ``cfg.select_best`` and a validation set, the checkpoint with the
    best validation accuracy is returned instead of the final one.
    """
    if len(dataset) < 2:
        raise ConfigError("training needs at least 2 samples")
    init_seed = cfg.init_seed if cfg.init_seed is not None else cfg.seed
    init_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=init_seed, spawn_key=(_STREAM_INIT,)))
    params = init_params(
        d_in=dataset.dim,
        d=cfg.feature_dim if cfg.feature_dim is not None else dataset.dim,
        d_h=cfg.projection_dim,
        n_classes=(cfg.num_prototypes if cfg.num_prototypes is not None
                   else dataset.num_classes),
        strategy=cfg.adapter_strategy,
        rng=init_rng,
    )
    if cfg.warm_start:
        _warm_start_prototypes(params, dataset)

    optimizer = SgdOptimizer(cfg.optimizer)
    history = TrainHistory()
    best_params = None
    best_acc = -np.inf
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        params, record = train_epoch(params, dataset, epoch, cfg, rng, optimizer)
        if validation is not None:
            record.val_acc = _validation_accuracy(params, validation)
            if cfg.select_best and record.val_acc > best_acc:
                best_acc = record.val_acc
                best_params = params.copy()
        history.records.append(record)
        if log_path is not None:
            append_log_line(log_path, record)

    if cfg.select_best and best_params is not None:
        params = best_params
    return params, history
