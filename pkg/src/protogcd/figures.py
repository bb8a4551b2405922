"""Matplotlib rendering of the report artifacts: training curves, class-count
score sweeps, OOD score histograms, and accuracy bars.

Figures are written next to the delimited reports; every function returns
the output path.  The Agg backend keeps rendering headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finalize(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(records, path: Path) -> Path:
    """Loss terms, DAPL schedule, and learning rate across epochs."""
    epochs = [r.epoch for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))

    ax = axes[0]
    for field, label in [("total", "total"), ("con_unsup", "contrastive (unsup)"),
                         ("con_sup", "contrastive (sup)"), ("dapl", "pseudo-label"),
                         ("sup_ce", "supervised CE")]:
        ax.plot(epochs, [getattr(r, field) for r in records], label=label, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.set_title("losses")

    ax = axes[1]
    ax.plot(epochs, [r.hard_ratio for r in records], label="hard-label ratio", lw=1.2)
    deltas = [r.delta for r in records]
    finite = [d if np.isfinite(d) else np.nan for d in deltas]
    ax2 = ax.twinx()
    ax2.plot(epochs, finite, color="tab:red", lw=1.0, label="threshold")
    ax2.set_yscale("log")
    ax2.set_ylabel("threshold", color="tab:red")
    ax.set_xlabel("epoch")
    ax.set_ylabel("hard-label ratio")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("pseudo-label schedule")

    ax = axes[2]
    ax.plot(epochs, [r.lr for r in records], lw=1.2)
    if any(r.val_acc is not None for r in records):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_acc if r.val_acc is not None else np.nan
                          for r in records], color="tab:green", lw=1.2)
        ax2.set_ylabel("validation acc", color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_title("schedule")

    fig.suptitle("training run", fontsize=10)
    return _finalize(fig, path)


def estimate_curves(probes, estimate: int, path: Path) -> Path:
    """Score components against candidate new-class counts."""
    by_candidate = {}
    for t in probes:
        by_candidate[t.candidate] = t  # later probes overwrite; scores agree
    cands = sorted(by_candidate)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(cands, [by_candidate[c].acc_score for c in cands],
            "o-", ms=3, lw=1.1, label="accuracy score")
    ax.plot(cands, [by_candidate[c].centr_score for c in cands],
            "s-", ms=3, lw=1.1, label="centroid score")
    ax.plot(cands, [by_candidate[c].proto_score for c in cands],
            "^-", ms=3, lw=1.4, label="prototype score")
    ax.axvline(estimate, color="tab:red", ls="--", lw=1.0,
               label=f"estimate = {estimate}")
    ax.set_xlabel("candidate number of new classes")
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    ax.set_title("class-number estimation")
    return _finalize(fig, path)


def ood_histograms(score_pairs: dict, path: Path) -> Path:
    """Overlaid ID/OOD score histograms, one panel per score function."""
    names = list(score_pairs)
    fig, axes = plt.subplots(1, len(names), figsize=(4.2 * len(names), 3.2),
                             squeeze=False)
    for ax, name in zip(axes[0], names):
        id_s, ood_s = score_pairs[name]
        bins = np.histogram_bin_edges(np.concatenate([id_s, ood_s]), bins=40)
        ax.hist(id_s, bins=bins, alpha=0.6, label="in-distribution", density=True)
        ax.hist(ood_s, bins=bins, alpha=0.6, label="outliers", density=True)
        ax.set_title(name)
        ax.set_xlabel("score")
        ax.legend(fontsize=8)
    axes[0][0].set_ylabel("density")
    return _finalize(fig, path)


def eval_bars(report, path: Path) -> Path:
    """Accuracy bars plus the two cluster-geometry metrics."""
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    names = ["All", "Old", "New"]
    values = [report.acc_all, report.acc_old, report.acc_new]
    ax.bar(names, values, color=["tab:blue", "tab:cyan", "tab:orange"])
    for i, v in enumerate(values):
        if np.isfinite(v):
            ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1.08)
    ax.set_ylabel("clustering accuracy")
    ax.set_title(f"compactness {report.compactness:.3f} / "
                 f"separation {report.separation:.3f}", fontsize=9)
    return _finalize(fig, path)
