"""Figures written next to the CSV outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gsm import approx_passive_decay, passive_decay_curve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_decay(alpha, eta, betas, k, path, representative=0.98):
    """Passive-update decay: exact curves per beta, plus approximation error."""
    steps = np.arange(k + 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(14, 3))
        for beta in betas:
            curve = passive_decay_curve(alpha, eta, beta, k)
            axes[0].plot(steps, curve, label=f"beta={beta}")
            axes[1].semilogy(steps, np.abs(curve) + 1e-300, label=f"beta={beta}")
        exact = passive_decay_curve(alpha, eta, representative, k)
        approx = approx_passive_decay(alpha, eta, representative, steps)
        axes[2].plot(steps, approx, color="C3")
        axes[3].plot(steps, exact - approx, color="C4")
        axes[0].set_title("w (exact)")
        axes[1].set_title("|w| (exact, log)")
        axes[2].set_title(f"approximation, beta={representative}")
        axes[3].set_title("exact - approximation")
        axes[0].legend(frameon=False)
        for ax in axes:
            ax.set_xlabel("passive updates")
        return _save(fig, path)


def plot_metrics(runs: dict, path, title=""):
    """Training curves for one or more runs keyed by label."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 5, figsize=(17, 3))
        for label, rows in runs.items():
            it = [r.iteration for r in rows]
            axes[0].plot(it, [r.orig_top1 for r in rows], label=label)
            axes[1].plot(it, [r.pruned_top1 for r in rows], label=label)
            axes[2].plot(it, [r.ratio_below_1e3 for r in rows], label=label)
            axes[2].plot(it, [r.ratio_below_1e4 for r in rows], ls="--")
            axes[3].plot(it, [r.train_loss for r in rows], label=label)
            axes[4].plot(it, [r.reactivation_ratio for r in rows], label=label)
        titles = ["original top1", "pruned top1", "ratio |w|<1e-3 (solid), <1e-4 (dashed)",
                  "training loss", "reactivation ratio"]
        for ax, t in zip(axes, titles):
            ax.set_title(t)
            ax.set_xlabel("iteration")
        axes[0].legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_sensitivity(accuracy, ratios, path, nonzero=None):
    """Single-layer pruning accuracy per layer, optionally with GSM nonzero ratios."""
    layers = np.arange(1, accuracy.shape[0] + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for j, ratio in enumerate(ratios):
            ax.plot(layers, accuracy[:, j], marker="o", label=f"prune {ratio:.1%}")
        ax.set_xlabel("kernel layer")
        ax.set_ylabel("top1 after single-layer pruning")
        ax.set_xticks(layers)
        if nonzero is not None:
            twin = ax.twinx()
            twin.plot(layers, nonzero, marker="s", color="k", ls=":", label="GSM discovered")
            twin.set_ylabel("GSM nonzero fraction")
            twin.legend(frameon=False, loc="lower right")
        ax.legend(frameon=False, loc="lower left")
        return _save(fig, path)
