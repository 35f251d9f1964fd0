"""Figure rendering for report artifacts.

Every figure is written through the Agg backend with the PNG Software
metadata stripped, so reruns with identical inputs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .coxph import HazardReport
from .fusion import TrainingLog
from .survival import BaselineSurvival

__all__ = [
    "save_bootstrap_figure",
    "save_comparison_figure",
    "save_forest_figure",
    "save_training_figure",
    "save_survival_figure",
]

_SAVE_OPTS = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_bootstrap_figure(named_summaries, path) -> None:
    """Violin per model of the replicate C-index values, mean marked."""
    named_summaries = list(named_summaries)
    if not named_summaries:
        raise ValueError("no summaries to plot")
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(named_summaries), 4.0))
    values = [s.replicate_values for _, s in named_summaries]
    positions = np.arange(1, len(values) + 1)
    ax.violinplot(values, positions=positions, showmeans=True, showextrema=False)
    for x, (_, summary) in zip(positions, named_summaries):
        ax.vlines(x, summary.ci_low, summary.ci_high, color="black", lw=1.2)
    ax.set_xticks(positions)
    ax.set_xticklabels([name for name, _ in named_summaries], rotation=20, ha="right")
    ax.set_ylabel("C-index")
    ax.set_title("Bootstrap replicate concordance")
    fig.tight_layout()
    _finish(fig, path)


def save_comparison_figure(name_a, summary_a, name_b, summary_b, result, path) -> None:
    """Two violins with the paired-test stars bridged between them."""
    fig, ax = plt.subplots(figsize=(4.4, 4.2))
    values = [summary_a.replicate_values, summary_b.replicate_values]
    ax.violinplot(values, positions=[1, 2], showmeans=True, showextrema=False)
    ax.set_xticks([1, 2])
    ax.set_xticklabels([name_a, name_b])
    ax.set_ylabel("C-index")
    top = max(v.max() for v in values)
    span = max(top - min(v.min() for v in values), 1e-3)
    y = top + 0.08 * span
    ax.plot([1, 1, 2, 2], [y, y + 0.03 * span, y + 0.03 * span, y], color="black", lw=1.0)
    ax.text(1.5, y + 0.05 * span, result.stars, ha="center", va="bottom")
    ax.set_ylim(top=y + 0.2 * span)
    fig.tight_layout()
    _finish(fig, path)


def save_forest_figure(report: HazardReport, path) -> None:
    """Hazard ratios with 95% intervals on a log axis, reference line at 1."""
    k = len(report.covariate_names)
    fig, ax = plt.subplots(figsize=(6.0, 1.0 + 0.33 * k))
    ys = np.arange(k)[::-1]
    hr = report.hazard_ratio
    err = np.vstack([hr - report.ci_low, report.ci_high - hr])
    ax.errorbar(hr, ys, xerr=err, fmt="o", color="black", ecolor="black", capsize=3, ms=4)
    ax.axvline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_yticks(ys)
    ax.set_yticklabels(report.covariate_names)
    ax.set_xscale("log")
    ax.set_xlabel("hazard ratio (95% CI)")
    fig.tight_layout()
    _finish(fig, path)


def save_training_figure(log: TrainingLog, path) -> None:
    """Loss curves per epoch with the restored-best epoch marked."""
    if not log.epochs:
        raise ValueError("training log holds no epochs")
    epochs = [e["epoch"] for e in log.epochs]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(epochs, [e["train_loss"] for e in log.epochs], label="train")
    ax.plot(epochs, [e["val_loss"] for e in log.epochs], label="validation")
    if log.best_epoch:
        ax.axvline(log.best_epoch, color="grey", lw=0.8, ls="--", label="restored epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Cox partial NLL")
    ax.legend()
    fig.tight_layout()
    _finish(fig, path)


def save_survival_figure(baseline: BaselineSurvival, path, risks=None) -> None:
    """Baseline survival step curve, optionally with per-risk overlays."""
    t = np.concatenate([[0.0], baseline.event_times])
    s0 = np.concatenate([[1.0], baseline.survival_values])
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.step(t, s0, where="post", label="baseline")
    for label, risk in list(risks or []):
        ax.step(t, s0 ** np.exp(risk), where="post", label=label)
    ax.set_xlabel("hours")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    fig.tight_layout()
    _finish(fig, path)
