"""Matplotlib figures for run reports; everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def distance_matrices(geodesic, euclidean, path, titles=("geodesic", "Euclidean (latent)")):
    """Side-by-side distance matrices, each scaled to its own maximum."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, mat, title in zip(axes, (geodesic, euclidean), titles):
        mat = np.asarray(mat)
        im = ax.imshow(mat / max(mat.max(), 1e-300), cmap="viridis", interpolation="nearest")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8, label="distance / max")
    return _save(fig, path)


def cluster_panels(latents, label_sets, path, truth=None):
    """One latent scatter per clustering, coloured by predicted cluster.

    ``label_sets`` maps a panel title to a label vector; ``truth`` sets the
    marker shape per true class.
    """
    z = np.asarray(latents)
    n = len(label_sets)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    markers = "os^vDP"
    classes = [None] if truth is None else np.unique(truth)
    for ax, (title, labels) in zip(axes[0], label_sets.items()):
        labels = np.asarray(labels)
        for c in classes:
            sel = np.ones(len(z), bool) if c is None else np.asarray(truth) == c
            mk = markers[0 if c is None else int(c) % len(markers)]
            ax.scatter(z[sel, 0], z[sel, 1], c=labels[sel], cmap="tab10", vmin=0, vmax=9,
                       s=18, marker=mk, edgecolors="k", linewidths=0.3)
        ax.set_title(title)
        ax.set_aspect("equal", adjustable="datalim")
    return _save(fig, path)


def field_heatmap(xs, ys, values, path, title, latents=None, cbar_label=""):
    """Colour map of a scalar field over the latent grid, optional code overlay."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.pcolormesh(xs, ys, values, shading="nearest", cmap="coolwarm")
    fig.colorbar(im, ax=ax, label=cbar_label)
    if latents is not None:
        z = np.asarray(latents)
        ax.scatter(z[:, 0], z[:, 1], s=4, c="k", alpha=0.6)
    ax.set_title(title)
    ax.set_aspect("equal", adjustable="box")
    return _save(fig, path)


def accuracy_bars(rows, path):
    """Bar chart of (method, accuracy) rows."""
    names = [r[0] for r in rows]
    acc = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(names, acc, color=["tab:blue", "tab:orange", "tab:green"][:len(rows)])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    for i, a in enumerate(acc):
        ax.text(i, a + 0.02, f"{a:.2f}", ha="center")
    return _save(fig, path)


def loss_curve(trace, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(trace) + 1), trace)
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative ELBO")
    return _save(fig, path)
