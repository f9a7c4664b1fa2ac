"""Report figures rendered to files next to the metric outputs."""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def trajectory_figure(est_positions, gt_positions, path):
    """Top-down XY plot of the estimated (and optionally ground-truth) path."""
    fig, ax = plt.subplots(figsize=(5, 4))
    est = np.asarray(est_positions)
    ax.plot(est[:, 0], est[:, 1], "o-", ms=3, label="estimated")
    if gt_positions is not None:
        gt = np.asarray(gt_positions)
        ax.plot(gt[:, 0], gt[:, 1], "x--", ms=4, label="ground truth")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.invert_yaxis()           # image convention: y grows downward
    ax.legend(loc="best", fontsize=8)
    ax.set_title("keyframe trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def depth_figure(Z, path, valid=None):
    show = np.array(Z, dtype=float)
    if valid is not None:
        show = np.where(valid, show, np.nan)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(show, cmap="viridis")
    fig.colorbar(im, ax=ax, shrink=0.85, label="relative height")
    ax.set_title("recovered depth")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(rows, path):
    labels = []
    ates, ades = [], []
    for row in rows:
        combo = row["combo"]
        labels.append("+".join(k for k, v in combo.items() if v) or "none")
        ate = row.get("ate")
        ates.append(ate["scaled"] if isinstance(ate, dict) else np.nan)
        ades.append(row["ade"] if row.get("ade") is not None else np.nan)
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(labels)), 4))
    width = 0.38
    ax.bar(x - width / 2, ates, width, label="ATE RMSE")
    ax.bar(x + width / 2, ades, width, label="ADE RMSE")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("error")
    ax.set_title("preprocessing ablation")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
