"""Matplotlib figures written next to the CSV outputs.

Everything renders through the Agg backend with a fixed style and no
timestamp metadata, so identical inputs give byte-identical PNG files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "vtkit",
}

_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_learning_curve(curve, path, title="learning curve"):
    """Test accuracy (left axis) and mean training loss (right axis) against iteration."""
    it = [p.iteration for p in curve.points]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        ax.plot(it, [p.test_accuracy for p in curve.points], "o-", color="tab:blue", ms=3, label="test accuracy")
        ax.set_xlabel("iteration")
        ax.set_ylabel("test accuracy", color="tab:blue")
        ax.set_ylim(0, 1.02)
        ax2 = ax.twinx()
        ax2.plot(it, [p.train_loss for p in curve.points], "s--", color="tab:red", ms=3, label="train loss")
        ax2.set_ylabel("train loss", color="tab:red")
        ax2.spines["right"].set_visible(True)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(report, path, title="confusion"):
    cm = report.confusion
    names = report.class_names
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.8))
        ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        hi = cm.max() if cm.size else 0
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if hi and cm[i, j] > hi / 2 else "black")
        ax.set_title(f"{title} (accuracy {report.accuracy:.4f})")
        fig.tight_layout()
        return _save(fig, path)


def plot_feature_maps(maps, path, ncols=8, title=None):
    """Grid of [0, 1] feature maps in gray scale."""
    n = len(maps)
    ncols = min(ncols, n) or 1
    nrows = math.ceil(n / ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.1 * ncols, 1.1 * nrows + (0.3 if title else 0)),
                                 squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.axis("off")
            if i < n:
                ax.imshow(np.asarray(maps[i]), cmap="gray", vmin=0, vmax=1)
        if title:
            fig.suptitle(title)
        fig.tight_layout(pad=0.2)
        return _save(fig, path)


def plot_search(results, path):
    """Validation accuracy of every trial against its learning rate (log axis)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        lr = [r.hyperparams.learning_rate for r in results]
        acc = [r.validation_accuracy for r in results]
        ax.scatter(lr, acc, c=[r.hyperparams.n_conv_layers for r in results], cmap="viridis", s=18)
        best = max(results, key=lambda r: (r.validation_accuracy, -r.trial))
        ax.scatter([best.hyperparams.learning_rate], [best.validation_accuracy], marker="*", s=120,
                   color="tab:red", label=f"best (trial {best.trial})")
        ax.set_xscale("log")
        ax.set_xlabel("learning rate")
        ax.set_ylabel("validation accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
