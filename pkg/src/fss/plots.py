"""PNG figures rendered next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ep = [h["epoch"] for h in history]
        ax.plot(ep, [h["train_loss"] for h in history], color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("query cross-entropy")
        ax2 = ax.twinx()
        ax2.plot(ep, [h["val_accuracy"] for h in history], color="C1", label="val accuracy")
        ax2.set_ylabel("validation accuracy")
        ax2.set_ylim(0, 1.02)
        fig.legend(loc="center right", frameon=False)
        return _save(fig, path)


def plot_sweep(rows, slope, intercept, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        x = np.array([r["proportion"] for r in rows])
        y = np.array([r["accuracy"] for r in rows])
        ax.plot(x, y, "o-", color="C0", label="test accuracy")
        xs = np.linspace(x.min(), x.max(), 50)
        ax.plot(xs, intercept + slope * xs, "--", color="0.4", label=f"fit, slope {slope:+.4f}")
        for r in rows:
            ax.annotate(f"f={r['f']}", (r["proportion"], r["accuracy"]), fontsize=6,
                        textcoords="offset points", xytext=(0, 5), ha="center")
        ax.set_xlabel("training-data proportion")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_attention(matrix, waveform, path, title=None):
    """Heatmap of a 66 x 66 map with the input waveform along the top."""
    with plt.rc_context(STYLE):
        fig, (top, ax) = plt.subplots(
            2, 1, figsize=(4, 4.6), gridspec_kw={"height_ratios": [1, 4]}, sharex=True
        )
        top.plot(np.arange(len(waveform)), waveform, color="k", lw=1)
        top.set_yticks([])
        if title:
            top.set_title(title)
        im = ax.imshow(matrix, aspect="auto", origin="upper", cmap="viridis",
                       extent=(-0.5, matrix.shape[1] - 0.5, matrix.shape[0] - 0.5, -0.5))
        ax.set_xlabel("key sample")
        ax.set_ylabel("query sample")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02)
        return _save(fig, path)


def plot_embeddings(features, labels, path):
    """Scatter of the first two principal components of the embedding."""
    X = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    xy = X @ vt[:2].T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.5))
        for c in np.unique(labels):
            m = labels == c
            ax.scatter(xy[m, 0], xy[m, 1], s=6, label=f"class {c}")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False, markerscale=2)
        return _save(fig, path)
