"""Figure rendering for CLI outputs. Every function writes a PNG and returns its path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _styled_axes(title: str, xlabel: str, ylabel: str, figsize=(6.0, 4.0)):
    fig, ax = plt.subplots(figsize=figsize, dpi=120)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, out_png):
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return str(out_png)


def fig_loss_curve(log_csv_path, out_png):
    data = np.genfromtxt(log_csv_path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    fig, ax = _styled_axes("training loss", "iteration", "loss")
    ax.plot(data["iter"], data["loss"], lw=0.8)
    ax.set_yscale("log")
    return _save(fig, out_png)


def fig_scatter(samples, out_png, title="samples", ref=None):
    samples = np.asarray(samples)
    fig, ax = _styled_axes(title, "x0", "x1", figsize=(5.0, 5.0))
    if ref is not None:
        ref = np.asarray(ref)
        ax.scatter(ref[:, 0], ref[:, 1], s=4, c="0.8", label="data")
    ax.scatter(samples[:, 0], samples[:, 1], s=4, c="tab:blue", alpha=0.6, label="generated")
    ax.set_xlim(-1.1, 1.1)
    ax.set_ylim(-1.1, 1.1)
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, out_png)


def fig_image_grid(samples, image_shape, out_png, max_images=64, title="samples"):
    samples = np.asarray(samples)[:max_images]
    rows_px, cols_px = image_shape
    n = len(samples)
    grid = int(np.ceil(np.sqrt(n)))
    fig, axes = plt.subplots(grid, grid, figsize=(grid, grid), dpi=120)
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, img in zip(axes, samples):
        ax.imshow(img.reshape(rows_px, cols_px), cmap="gray", vmin=-1, vmax=1)
    fig.suptitle(title)
    return _save(fig, out_png)


def fig_line(xs, ys, out_png, title, xlabel, ylabel, logy=False):
    fig, ax = _styled_axes(title, xlabel, ylabel)
    ax.plot(np.asarray(xs), np.asarray(ys), marker="o", ms=3, lw=1.0)
    if logy:
        ax.set_yscale("log")
    return _save(fig, out_png)


def fig_metric_bars(names, values, out_png, title="metrics"):
    fig, ax = _styled_axes(title, "", "value", figsize=(5.0, 4.0))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    return _save(fig, out_png)
