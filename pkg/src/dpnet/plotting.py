"""Figures for the CLI reports: rate plots, reconstruction montages, training curves.

Everything renders off-screen with the Agg backend and writes PNG files
without a software/date stamp so repeated runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_montage", "plot_rate", "plot_training", "save_figure"]

_META = {"Software": None}


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_rate(report, path, title: str = "") -> Path:
    """Log-log plot of the error and data residual against delta, with fitted slopes."""
    fig, ax = plt.subplots(figsize=(5, 4))
    d = np.asarray(report.deltas)
    for vals, slope, label, marker in (
        (report.errors, report.error_slope, "reconstruction error", "o"),
        (report.residuals, report.residual_slope, "data residual", "s"),
    ):
        ax.loglog(d, vals, marker=marker, ls="-", label=f"{label} (slope {slope:.2f})")
    ax.loglog(d, d * (report.errors[0] / d[0]), "k:", lw=1, label="slope 1")
    ax.set_xlabel(r"noise level $\delta$")
    ax.set_ylabel("worst case over draws")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)


def plot_montage(images: dict, path, truth: np.ndarray | None = None, ncols: int = 4) -> Path:
    """Grid of grey-scale reconstructions sharing the [0, 1] colour range."""
    panels = ([("ground truth", truth)] if truth is not None else []) + list(images.items())
    nrows = -(-len(panels) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.4 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (name, img) in zip(axes.ravel(), panels):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(name, fontsize=9)
    fig.tight_layout()
    return save_figure(fig, path)


def plot_training(logs: dict, path) -> Path:
    """Training (solid) and validation (dashed) loss per epoch for each named run."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, (name, log) in enumerate(logs.items()):
        colour = f"C{i % 10}"
        epochs = np.arange(1, len(log.train_loss) + 1)
        ax.semilogy(epochs, log.train_loss, color=colour, label=name)
        if len(log.val_loss):
            ax.semilogy(epochs, log.val_loss, color=colour, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return save_figure(fig, path)
