"""Figure helpers; every figure is written to a file, never shown."""
from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def figure(width: float = 6.0, height: float | None = None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden), facecolor="w")
    return fig, ax


def _save(fig, path, meta: dict | None = None) -> Path:
    """Write the figure; ``meta`` is stored as PNG text chunks (config echo)."""
    path = Path(path)
    fig.tight_layout()
    text = {k: v if isinstance(v, str) else json.dumps(v, sort_keys=True) for k, v in (meta or {}).items()}
    fig.savefig(path, dpi=120, metadata=text or None)
    plt.close(fig)
    return path


def loss_curves(records: list[dict], path, window: int = 50, meta: dict | None = None) -> Path:
    fig, ax = figure()
    iters = np.array([r["iter"] for r in records])
    for key in ("loss_total", "loss_ia", "loss_pred", "loss_guided"):
        if key not in records[0]:
            continue
        y = np.array([r[key] for r in records])
        if len(y) >= window:
            y = np.convolve(y, np.ones(window) / window, mode="valid")
            x = iters[window - 1:]
        else:
            x = iters
        ax.plot(x, y, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"loss ({window}-iter mean)")
    ax.legend(frameon=False)
    return _save(fig, path, meta)


def pr_curves(curves: dict, path, iou: float = 0.5, meta: dict | None = None) -> Path:
    fig, ax = figure(5, 4)
    for (cls, thr), (rc, pr) in sorted(curves.items()):
        if abs(thr - iou) < 1e-9:
            ax.step(rc, pr, where="post", label=f"class {cls}")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"IoU {iou:.2f}")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path, meta)


def query_points(image: np.ndarray, points_xy: np.ndarray, path, title: str = "", meta: dict | None = None) -> Path:
    """image: (3,H,W) in [0,1]; points in pixel coordinates."""
    fig, ax = figure(4, 4)
    ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1), interpolation="nearest")
    ax.scatter(points_xy[:, 0], points_xy[:, 1], s=18, c="red", edgecolors="white", linewidths=0.5)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path, meta)


def attention_grid(image: np.ndarray, maps: np.ndarray, path, meta: dict | None = None) -> Path:
    """maps: (n, H, W) attention heatmaps already at image resolution."""
    n = len(maps) + 1
    cols = min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    axes = axes.ravel()
    axes[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    axes[0].set_title("input", fontsize=8)
    for i, m in enumerate(maps, start=1):
        axes[i].imshow(m, cmap="viridis")
        axes[i].set_title(f"aux query {i - 1}", fontsize=8)
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path, meta)


def latency_bars(rows: list[dict], path, meta: dict | None = None) -> Path:
    fig, ax = figure(5, 3)
    labels = [r["label"] for r in rows]
    ax.bar(labels, [r["mean_ms"] for r in rows], color="0.4")
    ax.set_ylabel("mean latency (ms)")
    return _save(fig, path, meta)
