"""Report figures written next to the JSON outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

STYLE = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "lines.linewidth": 1.2,
}
# PNG text chunks carry the matplotlib version by default; drop it so reruns are byte-identical
_META = {"Software": None}


def _figure(width=6.0, height=3.6) -> Figure:
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width, height), dpi=110)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_META)
    return path


def _stretch(img: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(img, [1, 99])
    return np.clip((img - lo) / max(hi - lo, 1e-12), 0, 1)


def plot_trajectory(records: list[dict], path):
    """Loss components per adaptation iteration."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    it = [r["iter"] for r in records]
    for key, label in (("total", "total"), ("d_lambda", "spectral (1 - Q2n)"), ("spatial", "spatial")):
        ax.plot(it, [r[key] for r in records], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_tiles(pan: np.ndarray, tiles, path):
    """PAN image with candidate grid and selected tiles outlined."""
    fig = _figure(5.0, 5.0)
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(_stretch(pan), cmap="gray", interpolation="nearest")
    for r, c in tiles.candidates:
        ax.add_patch(Rectangle((c - 0.5, r - 0.5), tiles.size, tiles.size, fill=False, lw=0.3, ec="0.6"))
    for (r, c), k in zip(tiles.anchors, tiles.cluster_ids):
        ax.add_patch(Rectangle((c - 0.5, r - 0.5), tiles.size, tiles.size, fill=False, lw=1.5, ec="tab:orange"))
        ax.text(c + 4, r + 4, str(k), color="tab:orange", va="top", fontsize=7)
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def plot_alignment(scores: np.ndarray, grid: np.ndarray, shifts: np.ndarray, path):
    """Mean-correlation surface over the shift grid, one panel per band."""
    bands = scores.shape[0]
    fig = _figure(2.4 * bands, 2.6)
    ext = (grid[0] - 0.25, grid[-1] + 0.25, grid[-1] + 0.25, grid[0] - 0.25)
    for b in range(bands):
        ax = fig.add_subplot(1, bands, b + 1)
        ax.imshow(scores[b].T, extent=ext, cmap="viridis", interpolation="nearest")
        ax.plot([shifts[b, 0]], [shifts[b, 1]], "r+", ms=8)
        ax.set_title(f"band {b}: ({shifts[b, 0]:+.1f}, {shifts[b, 1]:+.1f})")
        ax.set_xlabel("dx")
        if b == 0:
            ax.set_ylabel("dy")
    fig.tight_layout()
    return _save(fig, path)
