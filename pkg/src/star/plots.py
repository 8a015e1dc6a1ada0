"""Matplotlib figure rendering for the CLI report paths (PNG files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history, path):
    """Loss and mean reward per epoch, two stacked panels."""
    epochs = [h[0] for h in history]
    losses = [h[1] for h in history]
    rewards = [h[2] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax1.plot(epochs, losses, marker="o", ms=3)
    ax1.set_ylabel("cross-entropy loss")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, rewards, marker="o", ms=3, color="tab:green")
    ax2.set_ylabel("mean reward")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(-0.02, 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_figure(confusion: np.ndarray, path):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for (i, j), v in np.ndenumerate(confusion):
        ax.text(j, i, str(int(v)), ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(freq: np.ndarray, path, title: str = ""):
    """One panel per agent; freq is (n_agents, window_len, n_channels)."""
    n_agents = freq.shape[0]
    fig, axes = plt.subplots(1, n_agents, figsize=(3.2 * n_agents, 3.2), squeeze=False)
    vmax = max(freq.max(), 1e-12)
    for i in range(n_agents):
        ax = axes[0][i]
        im = ax.imshow(freq[i], cmap="viridis", aspect="auto", vmin=0.0, vmax=vmax)
        ax.set_title(f"agent {i}", fontsize=9)
        ax.set_xlabel("channel")
        if i == 0:
            ax.set_ylabel("time step")
    fig.colorbar(im, ax=[axes[0][i] for i in range(n_agents)], fraction=0.02)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(summary_rows, path):
    """Bar chart of mean accuracy per variant with stddev whiskers.

    summary_rows: list of (variant, mean_accuracy, std_accuracy).
    """
    variants = [r[0] for r in summary_rows]
    means = [r[1] for r in summary_rows]
    stds = [r[2] for r in summary_rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(variants, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
