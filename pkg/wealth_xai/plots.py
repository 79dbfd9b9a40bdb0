"""SVG figures. Rendering is deterministic: fixed hash salt, no date metadata."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "wealth-xai"
matplotlib.rcParams["svg.fonttype"] = "none"


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss(history: pd.DataFrame, path: str | Path) -> Path:
    """Train/validation loss per epoch; a vertical bar marks the start of fine-tuning."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(history["epoch"], history["train_loss"], label="train")
    if history["val_loss"].notna().any():
        ax.plot(history["epoch"], history["val_loss"], label="validation")
    boundary = history.loc[history["boundary"] == 1, "epoch"]
    if len(boundary):
        ax.axvline(float(boundary.iloc[0]) - 0.5, color="k", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE on ln(1+NTL)")
    ax.legend()
    return save(fig, path)


def plot_sweep(curves: Mapping[str, pd.DataFrame], path: str | Path, xlabel: str, ylabel: str = "R²",
               baselines: Mapping[str, float] | None = None, log_x: bool = False) -> Path:
    """Mean curve with a ±1 std band per labelled sweep; dashed lines for baselines."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, curve in curves.items():
        x = np.asarray(curve.index, dtype=float)
        mean, std = curve["mean"].to_numpy(), curve["std"].to_numpy()
        (line,) = ax.plot(x, mean, marker="o", markersize=3, label=label)
        ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2)
        if baselines and label in baselines:
            ax.axhline(baselines[label], color=line.get_color(), linestyle="--", linewidth=1)
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    return save(fig, path)


def plot_elbow(curve: Mapping[int, float], chosen: int, path: str | Path) -> Path:
    ks = sorted(curve)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(ks, [curve[k] for k in ks], marker="o")
    ax.axvline(chosen, color="k", linestyle=":", linewidth=1)
    ax.set_xlabel("k")
    ax.set_ylabel("within-cluster SSE")
    return save(fig, path)


def plot_color_bars(table: pd.DataFrame, path: str | Path, baseline: float | None = None) -> Path:
    """Grouped bars (cluster × ablation) with bootstrap std error bars.

    `table` has columns cluster, ablation, mean, err.
    """
    clusters = list(dict.fromkeys(table["cluster"]))
    ablations = list(dict.fromkeys(table["ablation"]))
    width = 0.8 / max(1, len(ablations))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, abl in enumerate(ablations):
        sub = table[table["ablation"] == abl].set_index("cluster").reindex(clusters)
        xs = np.arange(len(clusters)) + i * width
        ax.bar(xs, sub["mean"], width, yerr=sub["err"], capsize=3, label=abl)
    if baseline is not None:
        ax.axhline(baseline, color="k", linestyle="--", linewidth=1)
    ax.set_xticks(np.arange(len(clusters)) + width * (len(ablations) - 1) / 2)
    ax.set_xticklabels([str(c) for c in clusters])
    ax.set_xlabel("kept cluster")
    ax.set_ylabel("R²")
    ax.legend()
    return save(fig, path)


def plot_panels(images: Sequence[np.ndarray], titles: Sequence[str], path: str | Path, ncols: int = 3) -> Path:
    """Grid of RGB images (H×W×3 in [0,1]) with one title each."""
    nrows = int(np.ceil(len(images) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(3 * ncols, 3 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img, title in zip(axes.ravel(), images, titles):
        ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
        ax.set_title(title, fontsize=8)
    return save(fig, path)
