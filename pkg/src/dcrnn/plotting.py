"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

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
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def learning_curves(records, path) -> Path:
    """Train/validation loss per epoch from a list of :class:`EpochRecord`."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [r.train_loss for r in records], label="train")
        ax.plot(epochs, [r.val_loss for r in records], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("masked loss (normalized)")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.epsilon for r in records], color="0.6", lw=0.8, ls="--", label="epsilon")
        ax2.set_ylim(-0.02, 1.02)
        ax2.set_ylabel("sampling probability")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        return _save(fig, path)


def horizon_metrics(records, path) -> Path:
    """One panel per metric against forecast horizon in minutes."""
    names = list(dict.fromkeys(name for _, name, _ in records))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.4 * len(names), 2.6), squeeze=False)
        for ax, name in zip(axes[0], names):
            pts = [(m, v) for m, n, v in records if n == name]
            ax.plot([m for m, _ in pts], [v for _, v in pts], marker="o")
            ax.set_title(name)
            ax.set_xlabel("horizon (min)")
        return _save(fig, path)


def filter_weights(node_ids, weights, center, path, coords=None) -> Path:
    """Bar chart (or scatter over ``coords`` when given) of a filter centred at ``center``."""
    w = np.asarray(weights, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if coords is None:
            colors = ["C3" if nid == center else "C0" for nid in node_ids]
            ax.bar(range(len(w)), w, color=colors)
            ax.set_xticks(range(len(w)))
            ax.set_xticklabels(node_ids, rotation=90 if len(w) > 12 else 0)
            ax.set_ylabel("weight")
        else:
            xy = np.asarray(coords, dtype=np.float64)
            sc = ax.scatter(xy[:, 0], xy[:, 1], c=w, cmap="viridis", s=40)
            fig.colorbar(sc, ax=ax, label="weight")
        ax.set_title(f"filter centred at {center}")
        return _save(fig, path)


def forecast(times, truth, pred, node_id, path) -> Path:
    """Truth and forecast traces for one node."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(times, truth, label="truth", color="0.3")
        ax.plot(times, pred, label="forecast", color="C1")
        ax.set_xlabel("step")
        ax.set_ylabel("speed (mph)")
        ax.set_title(str(node_id))
        ax.legend()
        return _save(fig, path)
