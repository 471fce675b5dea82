"""Matplotlib figures written next to the JSON/TSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def training_curves(history: Sequence[dict], val_history: Sequence[dict], path) -> Path:
    """Loss terms per step, active fraction, and validation scores per epoch."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    steps = [h["step"] for h in history]
    for key in ("j_ml", "j_vq", "j_total"):
        axes[0].plot(steps, [h[key] for h in history], label=key, linewidth=0.9)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend()

    act = [(h["step"], h["active_fraction"]) for h in history if h.get("active_fraction") is not None]
    if act:
        axes[1].plot(*zip(*act), color="tab:green")
    axes[1].set_ylim(0, 1.05)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("active code fraction")

    epochs = [v["epoch"] for v in val_history]
    for key in ("bleu", "self_bleu", "ibleu"):
        axes[2].plot(epochs, [v[key] for v in val_history], marker="o", markersize=3, label=key)
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("validation score")
    axes[2].legend()

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def ablation_bars(summary: Sequence[dict], path) -> Path:
    """Grouped bars of BLEU, self-BLEU and iBLEU per variant."""
    keys = ("bleu", "self_bleu", "ibleu")
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    width = 0.8 / len(summary) if summary else 0.8
    for i, row in enumerate(summary):
        xs = [k + i * width for k in range(len(keys))]
        ax.bar(xs, [row[k] for k in keys], width, label=row["variant"])
    ax.set_xticks([k + width * (len(summary) - 1) / 2 for k in range(len(keys))])
    ax.set_xticklabels(keys)
    ax.set_ylabel("test score (mean over seeds)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def code_usage(select_count: Sequence[int], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(range(len(select_count)), select_count, color="tab:purple")
    ax.set_xlabel("code index")
    ax.set_ylabel("times selected")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
