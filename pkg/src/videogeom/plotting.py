"""Figures written next to the CSV reports.

matplotlib is imported lazily with the Agg backend so the numeric modules
never depend on it.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_bench(rows: Sequence, path) -> Path:
    plt = _pyplot()
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    series = {}
    for r in rows:
        key = r.mode if r.chunk is None else f"{r.mode} C={r.chunk}"
        series.setdefault(key, []).append((r.n, r.ms_per_frame, r.peak_cache_frames))
    for key, pts in series.items():
        pts.sort()
        n, ms, peak = zip(*pts)
        ax_t.plot(n, ms, marker="o", label=key)
        ax_m.plot(n, peak, marker="o", label=key)
    ax_t.set_xlabel("frames")
    ax_t.set_ylabel("ms / frame")
    ax_m.set_xlabel("frames")
    ax_m.set_ylabel("peak cached frames")
    for ax in (ax_t, ax_m):
        ax.set_xscale("log", base=2)
        ax.grid(alpha=0.3)
    ax_t.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(log, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = log.column("step")
    for name in ("total", "points", "normal", "points_normal"):
        ax.plot(steps, log.column(name), lw=1, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_depth_errors(pred, gt, valid, path, max_frames: int = 4) -> Path:
    """Predicted depth, gt depth and relative error for the first frames."""
    import numpy as np

    plt = _pyplot()
    n = min(max_frames, len(gt))
    fig, axes = plt.subplots(3, n, figsize=(2.2 * n, 6.2), squeeze=False)
    for i in range(n):
        err = np.where(valid[i], np.abs(pred[i] - gt[i]) / np.where(valid[i], gt[i], 1.0), np.nan)
        for row, (img, title) in enumerate(((pred[i], "pred"), (gt[i], "gt"), (err, "rel err"))):
            ax = axes[row][i]
            ax.imshow(img, cmap="magma" if row < 2 else "viridis")
            ax.set_title(f"{title} {i}", fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
