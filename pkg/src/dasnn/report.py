"""PNG figures written next to the CSV/JSONL outputs of the CLI."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
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
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_probe(records, path, title: str = "") -> Path:
    """Firing rate and gradient stability per spiking layer."""
    ids = [r.layer_id for r in records]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a.bar(ids, [r.firing_rate for r in records], color="tab:blue")
        a.set_xlabel("spiking layer")
        a.set_ylabel("firing rate")
        b.plot(ids, [r.grad_stability for r in records], "o-", color="tab:red", ms=3)
        b.set_xlabel("spiking layer")
        b.set_ylabel("mean |dS/dV|")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_sweep(rows, path) -> Path:
    """log10 chain product against depth, one line per variant (mean and
    range over seeds)."""
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[r.variant][r.depth].append(r.log10_chain_product)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for variant, by_depth in groups.items():
            depths = sorted(by_depth)
            vals = [np.asarray(by_depth[d]) for d in depths]
            mean = [v.mean() for v in vals]
            ax.plot(depths, mean, "o-", ms=3, label=variant)
            ax.fill_between(depths, [v.min() for v in vals], [v.max() for v in vals], alpha=0.2)
        ax.set_xlabel("residual blocks")
        ax.set_ylabel("log10 chain product")
        ax.legend()
        return _save(fig, path)


def plot_history(history, path, title: str = "") -> Path:
    """Training loss and accuracies per epoch."""
    epochs = [h["epoch"] + 1 for h in history]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a.plot(epochs, [h["train_loss"] for h in history], "o-", ms=3, label="train")
        a.plot(epochs, [h["test_loss"] for h in history], "s--", ms=3, label="test")
        a.set_xlabel("epoch")
        a.set_ylabel("loss")
        a.legend()
        b.plot(epochs, [h["train_accuracy"] for h in history], "o-", ms=3, label="train")
        b.plot(epochs, [h["test_accuracy"] for h in history], "s--", ms=3, label="test")
        b.set_xlabel("epoch")
        b.set_ylabel("accuracy")
        b.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)
