"""Report figures written next to the CSV outputs.

Figures are built on a bare ``Figure`` with the Agg canvas so nothing
touches pyplot's global state.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STAGE_LABELS = {1: "stage 1: intensity encoder", 2: "stage 2: structure encoder", 3: "stage 3: task net"}


def _figure(width=6.0, height=4.0):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)


def plot_loss_curve(history, path, stage=None):
    epochs, losses = zip(*history)
    fig = _figure()
    ax = fig.add_subplot(111)
    ax.plot(epochs, losses, marker="o", ms=3, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    if min(losses) > 0 and max(losses) / min(losses) > 50:
        ax.set_yscale("log")
    ax.set_title(STAGE_LABELS.get(stage, "training loss"))
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_dice(report, path):
    """Box plot of per-sample Dice grouped by domain."""
    groups = {}
    for _, dom, d in report.rows:
        groups.setdefault(dom, []).append(d)
    names = sorted(groups)
    fig = _figure(1.5 + 1.2 * len(names), 4.0)
    ax = fig.add_subplot(111)
    ax.boxplot([groups[n] for n in names], tick_labels=names, showmeans=True)
    for i, n in enumerate(names, 1):
        ax.scatter(np.full(len(groups[n]), i), groups[n], s=8, alpha=0.6, color="k")
    ax.set_ylim(0.0, 1.02)
    ax.set_ylabel("Dice")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_panels(images, titles, path, cmap="gray"):
    fig = _figure(2.4 * len(images), 2.6)
    for k, (img, title) in enumerate(zip(images, titles), 1):
        ax = fig.add_subplot(1, len(images), k)
        if np.ndim(img) == 3:
            ax.imshow(img, interpolation="nearest")
        else:
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    _save(fig, path)
