"""Figures written next to the text/JSON reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(losses: Sequence[tuple[int, int, float]], path, title: str = "training loss") -> Path:
    """Per-batch loss with the per-epoch mean overlaid."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if losses:
            vals = np.array([l for _, _, l in losses])
            epochs = np.array([e for e, _, _ in losses])
            ax.plot(np.arange(len(vals)), vals, lw=0.6, alpha=0.5, label="batch")
            ends, means = [], []
            for e in np.unique(epochs):
                idx = np.nonzero(epochs == e)[0]
                ends.append(idx[-1])
                means.append(vals[idx].mean())
            ax.plot(ends, means, marker="o", ms=2.5, lw=1.2, label="epoch mean")
            ax.legend()
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path, metric: str = "accuracy") -> Path:
    """Bar per variant (mean over seeds) with individual seeds as dots."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        if r.get(metric) is not None:
            groups.setdefault(r["variant"], []).append(float(r[metric]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(groups) + 1), 3.6))
        names = list(groups)
        x = np.arange(len(names))
        ax.bar(x, [np.mean(groups[n]) for n in names], color="0.75", width=0.6)
        for i, n in enumerate(names):
            ax.plot(np.full(len(groups[n]), x[i]), groups[n], "o", ms=3, color="C0")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(metric)
        if metric.startswith("accuracy") and groups:
            lo = min(min(v) for v in groups.values())
            ax.set_ylim(max(0.0, lo - 5.0), 100.0)
        fig.tight_layout()
        return _save(fig, path)


def plot_attention(alpha: np.ndarray, path) -> Path:
    """Mean attention weight per window position, with the 10-90% band."""
    alpha = np.atleast_2d(alpha)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = np.arange(1, alpha.shape[1] + 1)
        ax.fill_between(t, np.percentile(alpha, 10, axis=0), np.percentile(alpha, 90, axis=0), alpha=0.3)
        ax.plot(t, alpha.mean(axis=0), lw=1.2)
        ax.set_xlabel("timestep in window")
        ax.set_ylabel("attention weight")
        fig.tight_layout()
        return _save(fig, path)
