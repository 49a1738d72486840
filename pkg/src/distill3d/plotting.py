"""Report figures rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_histogram(sums: np.ndarray, path, class_names: Sequence[str] | None = None) -> Path:
    """Bar chart of log10 summed pseudo-label probability per class."""
    sums = np.asarray(sums, dtype=np.float64)
    logs = np.where(sums > 0, np.log10(np.maximum(sums, 1e-300)), np.nan)
    names = list(class_names) if class_names else [str(c) for c in range(len(sums))]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(np.arange(len(sums)), np.nan_to_num(logs, nan=0.0), color="#4c72b0")
    ax.set_xticks(np.arange(len(sums)))
    ax.set_xticklabels(names[:len(sums)], rotation=45, ha="right")
    ax.set_ylabel("log10 summed probability")
    return _save(fig, path)


def plot_losses(history: Sequence[dict] | Sequence[float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if history and isinstance(history[0], dict):
        for key in history[0]:
            vals = [h[key] for h in history]
            if any(v != 0 for v in vals):
                ax.plot(np.arange(1, len(vals) + 1), vals, marker="o", ms=3, label=key)
        ax.legend(frameon=False)
    elif history:
        ax.plot(np.arange(1, len(history) + 1), list(history), marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_iou(iou: np.ndarray, path, class_names: Sequence[str] | None = None, mean: float | None = None) -> Path:
    iou = np.asarray(iou, dtype=np.float64)
    names = list(class_names) if class_names else [str(c) for c in range(len(iou))]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(iou))
    ax.bar(x, np.nan_to_num(iou), color=["#dd8452" if np.isnan(v) else "#55a868" for v in iou])
    if mean is not None:
        ax.axhline(mean, color="k", lw=1, ls="--", label=f"mIoU {mean:.3f}")
        ax.legend(frameon=False)
    ax.set_xticks(x)
    ax.set_xticklabels(names[:len(iou)], rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    return _save(fig, path)
