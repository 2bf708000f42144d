"""Report figures rendered next to the text outputs."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .train import LOSS_ORDER, LogPoint

PART_LABELS = {
    "rpn_cls": "proposal cls",
    "rpn_reg": "proposal reg",
    "act_cls": "action cls",
    "roi_reg": "box refine",
}


def save_curves_figure(curves: Sequence[LogPoint], path) -> None:
    """Two panels: per-part losses and the error rate over iterations."""
    iters = [p.iteration for p in curves]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name in LOSS_ORDER:
        ys = [p.parts.get(name) for p in curves]
        if all(y is None for y in ys):
            continue
        ax1.plot(iters, [y if y is not None else np.nan for y in ys],
                 label=PART_LABELS[name], linewidth=1.2)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_title("losses")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)

    ax2.plot(iters, [p.err_rate for p in curves], color="tab:red", linewidth=1.2)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("error rate")
    ax2.set_ylim(-0.02, 1.02)
    ax2.set_title("training error")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_pr_figure(pr_points: Sequence[Tuple[float, float]], ap: float, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if pr_points:
        recall, precision = zip(*pr_points)
        ax.plot(recall, precision, linewidth=1.4)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"detection PR (AP = {ap:.3f})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_detection_overlay(frames: np.ndarray, pred_boxes: np.ndarray,
                           gt_boxes: Optional[np.ndarray], path,
                           title: str = "") -> None:
    """Grid of clip frames with predicted (red) and true (green) boxes.

    ``frames`` is [3, L, S, S] in [0, 1]; boxes are [L, 4].
    """
    l = frames.shape[1]
    cols = min(l, 4)
    rows = (l + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows))
    axes = np.atleast_1d(axes).reshape(-1)
    for t in range(l):
        ax = axes[t]
        ax.imshow(np.transpose(frames[:, t], (1, 2, 0)))
        if gt_boxes is not None:
            x1, y1, x2, y2 = gt_boxes[t]
            ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1,
                                       fill=False, edgecolor="lime", linewidth=1.2))
        x1, y1, x2, y2 = pred_boxes[t]
        ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1,
                                   fill=False, edgecolor="red", linewidth=1.2))
        ax.set_title(f"t={t}", fontsize=8)
        ax.axis("off")
    for t in range(l, len(axes)):
        axes[t].axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
