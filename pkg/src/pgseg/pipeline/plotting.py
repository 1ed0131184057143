"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from pgseg.vocab import NUM_CLASSES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
}
PALETTE = ["#0C5DA5", "#00A08A", "#F2AD00", "#F98400", "#5BBCD6", "#B40F20"]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_summary(summary: dict, path: str | Path) -> Path:
    """Per-organ Dice bars in table column order, mDice/HD95 in the title."""
    organs = [k for k in summary if k not in ("mDice", "HD95", "hd95_undefined", "n_cases")]
    values = [100 * summary[k] for k in organs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.0))
        ax.bar(organs, values, color=PALETTE[0], width=0.65)
        ax.axhline(100 * summary["mDice"], color=PALETTE[3], lw=1, ls="--", label="mDice")
        ax.set_ylim(0, 100)
        ax.set_ylabel("Dice (%)")
        hd = summary["HD95"]
        hd_txt = "n/a" if hd is None else f"{hd:.2f}"
        ax.set_title(f"mDice {100 * summary['mDice']:.2f}  |  HD95 {hd_txt} px  |  {summary['n_cases']} slices")
        ax.tick_params(axis="x", rotation=30)
        ax.legend(frameon=False, loc="lower right")
        ax.grid(axis="y", alpha=0.25, lw=0.5, ls="--")
        return _save(fig, path)


def plot_history(history: list[dict], path: str | Path) -> Path:
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(epochs, [r["loss"] for r in history], color=PALETTE[0], lw=1.2, label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("combined loss")
        evals = [(r["epoch"], r["val_mdice"]) for r in history if "val_mdice" in r]
        if evals:
            ax2 = ax.twinx()
            ax2.plot(*zip(*evals), color=PALETTE[3], marker="o", ms=3, lw=1.0, label="val mDice")
            ax2.set_ylim(0, 1)
            ax2.set_ylabel("val mDice")
            ax2.spines["right"].set_visible(True)
        return _save(fig, path)


def plot_inference(image: np.ndarray, labels: np.ndarray, heatmap: np.ndarray | None, path: str | Path) -> Path:
    panels = 3 if heatmap is not None else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, panels, figsize=(3.0 * panels, 3.0))
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("input")
        axes[1].imshow(image, cmap="gray", vmin=0, vmax=1)
        overlay = np.ma.masked_where(labels == 0, labels)
        axes[1].imshow(overlay, cmap="tab10", vmin=0, vmax=NUM_CLASSES, alpha=0.55, interpolation="nearest")
        axes[1].set_title("prediction")
        if heatmap is not None:
            axes[2].imshow(image, cmap="gray", vmin=0, vmax=1)
            axes[2].imshow(heatmap, cmap="jet", alpha=0.45)
            axes[2].set_title("guide matrix |G|")
        for ax in axes:
            ax.set_axis_off()
        return _save(fig, path)
