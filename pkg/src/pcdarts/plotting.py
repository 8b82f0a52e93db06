"""Report figures: score histograms, DET curves, learning curves, architecture weights."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

from .metrics import ScoreRecord, det_points, score_histogram  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
BONA_COLOR = "#1b7837"
SPOOF_COLOR = "#b2182b"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_score_histogram(records: Sequence[ScoreRecord], path, bins: int = 40, threshold: float | None = None) -> Path:
    edges, hb, hs = score_histogram(records, bins)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        width = np.diff(edges)
        ax.bar(edges[:-1], hb, width, align="edge", alpha=0.6, color=BONA_COLOR, label="bona fide")
        ax.bar(edges[:-1], hs, width, align="edge", alpha=0.6, color=SPOOF_COLOR, label="spoof")
        if threshold is not None and np.isfinite(threshold):
            ax.axvline(threshold, color="k", lw=0.8, ls="--", label="EER threshold")
        ax.set_xlabel("score (higher = more bona fide)")
        ax.set_ylabel("trials")
        ax.legend()
        return _save(fig, path)


def plot_det(records: Sequence[ScoreRecord], path, eer: float | None = None) -> Path:
    _, p_miss, p_fa = det_points(records)
    clip = 1e-4
    x = norm.ppf(np.clip(p_fa, clip, 1 - clip))
    y = norm.ppf(np.clip(p_miss, clip, 1 - clip))
    ticks = np.array([0.001, 0.01, 0.05, 0.2, 0.5, 0.8])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.plot(x, y, color="k", lw=1.2)
        if eer is not None:
            e = norm.ppf(np.clip(eer, clip, 1 - clip))
            ax.plot([e], [e], "o", color=SPOOF_COLOR, ms=4, label=f"EER {100 * eer:.2f}%")
            ax.legend(loc="upper right")
        ax.set_xticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
        ax.set_yticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
        lim = norm.ppf([5e-4, 0.9])
        ax.set_xlim(lim)
        ax.set_ylim(lim)
        ax.set_xlabel("false alarm rate (%)")
        ax.set_ylabel("miss rate (%)")
        return _save(fig, path)


def plot_learning_curves(history: Sequence[dict], path, columns: Sequence[str]) -> Path:
    epochs = [row["epoch"] for row in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for c in columns:
            vals = [row.get(c, np.nan) for row in history]
            if np.all(np.isnan(np.asarray(vals, dtype=float))):
                continue
            ax.plot(epochs, vals, marker=".", lw=1, label=c)
        ax.set_xlabel("epoch")
        ax.legend()
        return _save(fig, path)


def plot_arch_weights(snapshot: dict, primitives: Sequence[str], edges: Sequence[tuple[int, int]], path) -> Path:
    """Softmax(alpha) per edge for both cell types, edge rows labelled i->j."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 0.25 * len(edges) + 1.5), sharey=True)
        for ax, t in zip(axes, ("normal", "reduce")):
            a = np.asarray(snapshot[f"alpha_{t}"], dtype=np.float64)
            p = np.exp(a - a.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            im = ax.imshow(p, aspect="auto", cmap="viridis")
            ax.set_title(t)
            ax.set_xticks(range(len(primitives)), primitives, rotation=60, ha="right")
            ax.set_yticks(range(len(edges)), [f"{i}->{j}" for i, j in edges])
            ax.grid(False)
        fig.colorbar(im, ax=axes, shrink=0.8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path
