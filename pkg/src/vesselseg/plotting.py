"""Report figures: training curves, metric comparison bars, MIP panels."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BLUE = "#0072b2"
VERMILLION = "#d55e00"
GREEN = "#009e73"
GREY = "#777777"

RC = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "vesselseg",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(records: Sequence[dict], path) -> Path:
    """Per-epoch supervised / consistency / total loss and validation Dice."""
    epochs = [r for r in records if r.get("batch") is None]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        x = [r["epoch"] + 1 for r in epochs]
        ax1.plot(x, [r["l_sup"] for r in epochs], color=BLUE, marker="o", ms=3, label="supervised")
        if any(r.get("l_cons") is not None for r in epochs):
            ax1.plot(x, [r["l_cons"] or 0.0 for r in epochs], color=VERMILLION, marker="s", ms=3, label="consistency")
        ax1.plot(x, [r["total"] for r in epochs], color=GREY, ls="--", label="total")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        vals = [(e, r["val_dice"]) for e, r in zip(x, epochs) if r.get("val_dice") is not None]
        if vals:
            ax2.plot(*zip(*vals), color=GREEN, marker="o", ms=3)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation Dice")
        ax2.set_ylim(0, 1)
        fig.tight_layout()
        return _save(fig, path)


def metric_bars(reports, path) -> Path:
    """Mean ± std Dice and IoU per method, in percent."""
    names = [r.method for r in reports]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 2.8))
        pos = np.arange(len(names))
        for off, metric, color in ((-0.18, "dice", BLUE), (0.18, "iou", VERMILLION)):
            mean = [100 * r.summary[metric][0] for r in reports]
            std = [100 * r.summary[metric][1] for r in reports]
            ax.bar(pos + off, mean, 0.36, yerr=std, capsize=3, color=color, label=metric.upper())
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def mip_panel(images: Sequence[np.ndarray], titles: Sequence[str], path) -> Path:
    """Side-by-side projections; RGB arrays are shown as-is, 2D ones in gray."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6), squeeze=False)
        for ax, img, title in zip(axes[0], images, titles):
            img = np.asarray(img)
            # rows = second array axis so x runs left to right
            shown = np.swapaxes(img, 0, 1)
            ax.imshow(shown, cmap=None if img.ndim == 3 else "gray", origin="lower", interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        return _save(fig, path)
