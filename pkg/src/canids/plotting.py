"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import ConfusionMatrix, EvalReport
from .train import TrainLog

FIGSIZE = (6.0, 4.5)
DPI = 120

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_confusion_matrix(cm: ConfusionMatrix, path, title: str = "Confusion matrix",
                          normalize: bool = True):
    counts = cm.counts.astype(float)
    shown = counts / np.maximum(counts.sum(1, keepdims=True), 1) if normalize else counts
    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=1 if normalize else None)
    n = len(cm.labels)
    ax.set_xticks(range(n), cm.labels, rotation=30, ha="right")
    ax.set_yticks(range(n), cm.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center", fontsize=7,
                    color="white" if shown[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_fnr_by_attack(reports: dict[str, EvalReport], path, title: str = "False-negative rate by class",
                       attacks_only: bool = True):
    """Grouped bars: one group per class, one bar per model/configuration."""
    first = next(iter(reports.values()))
    classes = first.attack_classes() if attacks_only else first.classes
    names = [c.name for c in classes]
    width = 0.8 / len(reports)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for k, (model, rep) in enumerate(reports.items()):
        vals = [100 * (rep.by_name(n).fnr or 0.0) for n in names]
        ax.bar(x + (k - (len(reports) - 1) / 2) * width, vals, width, label=model)
    ax.set_xticks(x, names)
    ax.set_ylabel("FNR (%)")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_training_curves(logs: list[TrainLog], path, title: str = "Training loss"):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for trace in logs:
        ax.plot([e.epoch for e in trace.epochs], trace.losses, marker="o", ms=3, label=trace.stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_latency_histogram(times_ms, path, title: str = "Batch-1 inference latency"):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.hist(times_ms, bins=50, color="0.4")
    ax.axvline(float(np.median(times_ms)), color="C3", ls="--", label="median")
    ax.set_xlabel("ms / frame")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)
