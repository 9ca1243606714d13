"""PNG figures for loss curves and confusion matrices.

Figures are drawn on an Agg canvas directly, so no display or global
pyplot state is involved. PNG metadata is stripped of the software tag to
keep repeated renders byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evalkit import CLASSES, ConfusionMatrix
from .training import LossCurve

_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def plot_loss_curve(curve: LossCurve, path, title: str = "loss") -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    epochs = np.arange(1, len(curve) + 1)
    ax.plot(epochs, curve.train, label="train")
    ax.plot(epochs, curve.val, label="validation")
    if curve.best_epoch is not None:
        ax.axvline(curve.best_epoch, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, path, title: str = "confusion matrix") -> Path:
    """Heatmap of row-normalised counts, annotated with the raw counts."""
    counts = cm.counts
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    names = [c.display for c in CLASSES]
    fig = Figure(figsize=(5.5, 4.5))
    ax = fig.add_subplot()
    im = ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
