"""Figures written next to the text outputs: loss curves, trajectories, per-frame Chamfer."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings in the files, so reruns give identical bytes
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def read_metrics(path) -> np.ndarray:
    """Rows of ``(iter, chamfer, topology, total)`` from a metrics.tsv file."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("iter"):
            continue
        rows.append([float(v) for v in line.split("\t")])
    return np.array(rows).reshape(-1, 4)


def plot_training_curve(rows: np.ndarray, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        it = rows[:, 0]
        ax.semilogy(it, rows[:, 1], label="chamfer")
        ax.semilogy(it, np.maximum(rows[:, 2], 1e-300), label="topology", alpha=0.8)
        ax.semilogy(it, rows[:, 3], label="total", color="k", lw=0.8, ls="--")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_trajectory(frames, path, labels=None, max_points: int = 2048):
    """One 3-D scatter panel per frame, colored by point index so correspondence is visible."""
    frames = [np.asarray(getattr(f, "points", f)) for f in frames]
    n = len(frames[0])
    keep = np.linspace(0, n - 1, min(n, max_points)).astype(int)
    lim = max(float(np.abs(f).max()) for f in frames) or 1.0
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(2.2 * len(frames), 2.4))
        for k, pts in enumerate(frames):
            ax = fig.add_subplot(1, len(frames), k + 1, projection="3d")
            p = pts[keep]
            ax.scatter(p[:, 0], p[:, 2], p[:, 1], c=keep, cmap="viridis", s=2, linewidths=0)
            ax.set_xlim(-lim, lim)
            ax.set_ylim(-lim, lim)
            ax.set_zlim(-lim, lim)
            ax.set_axis_off()
            if labels is not None:
                ax.set_title(labels[k])
        return _save(fig, path)


def plot_frame_chamfer(to_source, to_target, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        t = np.arange(len(to_source))
        ax.plot(t, to_source, "o-", label="to source")
        ax.plot(t, to_target, "s-", label="to target")
        ax.set_xlabel("frame")
        ax.set_ylabel("Chamfer distance")
        ax.set_xticks(t)
        ax.legend(frameon=False)
        return _save(fig, path)
