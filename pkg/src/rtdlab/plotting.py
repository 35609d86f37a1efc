"""Compute-vs-quality figure for ``curves``. Matplotlib is imported lazily so
the rest of the package never needs it."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

# fixed colours so a variant looks the same in every figure
VARIANT_COLORS = {
    "electra": "#1f77b4",
    "all-tokens-mlm": "#2ca02c",
    "replace-mlm": "#9467bd",
    "electra15": "#ff7f0e",
    "bert": "#d62728",
    "unigram-electra": "#8c564b",
    "two-stage": "#7f7f7f",
    "adversarial": "#e377c2",
}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def plot_curves(rows, path: str | Path, title: str = "") -> Path:
    """Probe accuracy and detection/MLM losses against cumulative FLOPs.

    Thin lines are individual seeds, thick lines the per-variant mean.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_run = defaultdict(list)
    for r in rows:
        by_run[(str(r["variant"]), int(r["seed"]))].append(r)
    variants = sorted({v for v, _ in by_run}, key=lambda v: list(VARIANT_COLORS).index(v)
                      if v in VARIANT_COLORS else len(VARIANT_COLORS))

    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4), constrained_layout=True)
    for v in variants:
        color = VARIANT_COLORS.get(v, "black")
        series = []
        for (var, _), rs in sorted(by_run.items()):
            if var != v:
                continue
            rs = sorted(rs, key=lambda r: int(r["cumulative_flops"]))
            x = np.array([int(r["cumulative_flops"]) for r in rs], dtype=float)
            y = np.array([float(r["probe_accuracy"]) for r in rs])
            axes[0].plot(x, y, color=color, alpha=0.25, linewidth=0.8)
            series.append((x, y))
        xs = series[0][0]
        if all(np.array_equal(s[0], xs) for s in series):
            axes[0].plot(xs, np.mean([s[1] for s in series], axis=0), color=color, linewidth=2.0,
                         marker="o", markersize=3, label=v)
        # BERT has no detection tower; its main-tower loss is the MLM loss
        column = "mlm_loss" if v == "bert" else "disc_loss"
        loss = [(int(r["cumulative_flops"]), float(r[column])) for (var, _), rs in by_run.items()
                if var == v for r in rs]
        loss.sort()
        lx = sorted({f for f, _ in loss})
        ly = [np.mean([l for f2, l in loss if f2 == f]) for f in lx]
        axes[1].plot(lx, ly, color=color, linewidth=1.5, marker="o", markersize=3, label=v)

    axes[0].set_xlabel("pre-training FLOPs")
    axes[0].set_ylabel("probe accuracy")
    axes[1].set_xlabel("pre-training FLOPs")
    axes[1].set_ylabel("main-tower loss")
    axes[1].set_yscale("log")
    for ax in axes:
        _style(ax)
        ax.ticklabel_format(axis="x", style="sci", scilimits=(0, 0))
    axes[0].legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
