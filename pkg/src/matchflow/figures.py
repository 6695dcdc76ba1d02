"""Matplotlib renderings saved next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataio import EpeReport


def save_training_curves(trace, path: str):
    """Loss components and training error over optimization steps."""
    steps = [r.step for r in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [r.total for r in trace], label="total", color="black")
    ax1.plot(steps, [r.sequence for r in trace], label="refinement", color="tab:blue")
    ax1.plot(steps, [r.matching for r in trace], label="matching", color="tab:orange")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [r.train_aepe for r in trace], color="tab:red")
    ax2.set_xlabel("step")
    ax2.set_ylabel("train AEPE (px)")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_bars(report: EpeReport, path: str):
    """Per-bin endpoint error as a labeled bar chart."""
    rows = report.rows()
    names = [r[0] for r in rows]
    values = [0.0 if np.isnan(r[1]) else r[1] for r in rows]
    counts = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(names, values, color=["tab:blue"] * (len(rows) - 1) + ["tab:gray"])
    for bar, cnt in zip(bars, counts):
        ax.annotate(f"n={cnt}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("AEPE (px)")
    ax.set_title(f"outlier rate {100 * report.fl_all:.2f}%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_costvis_heatmap(dist: np.ndarray, path: str, bin_name: str):
    """Averaged local match distribution; the true target sits at the center."""
    w = dist.shape[0] // 2
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(dist, cmap="viridis", origin="upper",
                   extent=(-w - 0.5, w - 0.5, w - 0.5, -w - 0.5))
    ax.scatter([0], [0], marker="+", color="red", s=80, label="true target")
    ax.set_xlabel("column offset (1/8-grid cells)")
    ax.set_ylabel("row offset")
    ax.set_title(f"match distribution, bin {bin_name}")
    ax.legend(fontsize=8, loc="upper right")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_flow_png(rgb: np.ndarray, path: str):
    """Write an (H, W, 3) uint8 rendering as a PNG."""
    from PIL import Image

    Image.fromarray(rgb).save(path)
