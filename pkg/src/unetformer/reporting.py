"""Rendering of training curves, evaluation figures, and delimited outputs.

Every figure lands next to the machine-readable file it illustrates: the
training log gets loss/learning-rate/mIoU curves, evaluation gets a
confusion-matrix heatmap and a per-class score chart alongside the JSON
and CSV score tables.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ConfusionMatrix


def training_curves(history: list[dict], path) -> Path:
    """Loss components, learning rate, and per-epoch training mIoU."""
    steps = [h for h in history if h.get("kind") == "step"]
    epochs = [h for h in history if h.get("kind") == "epoch"]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))

    if steps:
        xs = [h["step"] for h in steps]
        for key in ("loss", "ce", "dice", "aux"):
            axes[0].plot(xs, [h[key] for h in steps], label=key)
        axes[1].plot(xs, [h["lr"] for h in steps], color="tab:green")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[0].set_title("training loss")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("learning rate")
    axes[1].set_title("cosine schedule")

    if epochs:
        xs = [h["epoch"] for h in epochs]
        axes[2].plot(xs, [h["train_miou"] for h in epochs], marker="o",
                     color="tab:purple")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("train mIoU")
    axes[2].set_ylim(0, 1)
    axes[2].set_title("training mIoU")

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def confusion_figure(matrix: ConfusionMatrix, path) -> Path:
    """Row-normalized confusion heatmap with count annotations."""
    counts = matrix.matrix.astype(np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, row_sums, out=np.zeros_like(counts),
                           where=row_sums > 0)
    k = matrix.num_classes
    fig, ax = plt.subplots(figsize=(1.1 * k + 2, 1.1 * k + 1.5))
    im = ax.imshow(normalized, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(k), matrix.class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), matrix.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    for i in range(k):
        for j in range(k):
            color = "white" if normalized[i, j] > 0.5 else "black"
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                    color=color, fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def class_scores_figure(scores: dict[str, float], class_names: list[str],
                        path) -> Path:
    """Grouped bars of per-class F1 and IoU."""
    f1 = [scores[f"f1.{n}"] for n in class_names]
    iou = [scores[f"iou.{n}"] for n in class_names]
    x = np.arange(len(class_names))
    fig, ax = plt.subplots(figsize=(1.2 * len(class_names) + 3, 4))
    ax.bar(x - 0.2, f1, width=0.4, label="F1", color="tab:blue")
    ax.bar(x + 0.2, iou, width=0.4, label="IoU", color="tab:orange")
    ax.set_xticks(x, class_names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.axhline(scores["miou"], color="tab:orange", linestyle="--", linewidth=1,
               label=f"mIoU = {scores['miou']:.3f}")
    ax.legend(loc="lower right")
    ax.set_title(f"per-class scores (OA = {scores['oa']:.3f})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_metrics_json(scores: dict[str, float], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics_csv(scores: dict[str, float], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(scores):
            writer.writerow([key, f"{scores[key]:.10g}"])
    return path


def write_confusion_csv(matrix: ConfusionMatrix, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reference\\predicted"] + matrix.class_names)
        for name, row in zip(matrix.class_names, matrix.matrix):
            writer.writerow([name] + [int(v) for v in row])
    return path
