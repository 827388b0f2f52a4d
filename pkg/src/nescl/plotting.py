"""Figures written next to the run's CSV/JSON output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(history: list[dict], path, title: str | None = None) -> None:
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss_total", "loss_rank", "loss_contrastive"):
        ax_loss.plot(epochs, [r[key] for r in history], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend()
    for key in ("recall@20", "ndcg@20"):
        ax_metric.plot(epochs, [r[key] for r in history], label=key)
    ax_metric.set_xlabel("epoch")
    ax_metric.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(param: str, rows: list[dict], path) -> None:
    """``rows`` carry ``value``, ``recall@20`` and ``ndcg@20``."""
    xs = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, [r["recall@20"] for r in rows], marker="o", label="recall@20")
    ax.plot(xs, [r["ndcg@20"] for r in rows], marker="s", label="ndcg@20")
    ax.set_xlabel(param)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
