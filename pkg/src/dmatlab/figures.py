"""Figure rendering for emitted reports: snapshot-accuracy curves and a
regime-by-attack accuracy matrix, written as PNG files next to the CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_curves", "render_matrix", "render_all"]

_CURVE_PANELS = (("standard", "standard accuracy"),
                 ("pgd50", "accuracy under pgd50"),
                 ("om_pgd50", "accuracy under om_pgd50"))


def render_curves(report, path) -> str:
    """Three panels of per-snapshot accuracy (clean / image attack / latent
    attack), one line per regime."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4), sharey=True)
    for ax, (key, title) in zip(axes, _CURVE_PANELS):
        for regime, rows in sorted(report.curves.items()):
            epochs = [r["epoch"] for r in rows]
            ax.plot(epochs, [r[key] for r in rows], marker="o", markersize=3,
                    linewidth=1.2, label=regime)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("epoch")
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("accuracy")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_matrix(report, eval_set: str, path) -> str:
    """Heatmap of accuracy per (regime, attack) for one eval set."""
    regimes = report.regimes()
    attacks = ["standard"] + report.attacks(eval_set)
    grid = np.full((len(regimes), len(attacks)), np.nan)
    for i, regime in enumerate(regimes):
        for j, attack in enumerate(attacks):
            key = (regime, eval_set, attack)
            if key in report.cells:
                grid[i, j] = report.cells[key]
    fig, ax = plt.subplots(figsize=(1.1 * len(attacks) + 2, 0.5 * len(regimes) + 1.6))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(attacks)), attacks, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(regimes)), regimes, fontsize=8)
    for i in range(len(regimes)):
        for j in range(len(attacks)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        fontsize=7, color="white" if grid[i, j] < 0.5 else "black")
    ax.set_title(f"accuracy, {eval_set} test set", fontsize=10)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_all(report, fig_dir) -> list:
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    files = []
    if report.curves:
        files.append(render_curves(report, fig_dir / "curves.png"))
    for eval_set in sorted({s for (_, s, _) in report.cells}):
        files.append(render_matrix(report, eval_set, fig_dir / f"robustness_{eval_set}.png"))
    return files
