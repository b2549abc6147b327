"""Matplotlib figures written next to the CSV/JSON outputs.

Figures are drawn on bare ``Figure`` objects (no pyplot state) and saved
without a software/date stamp so that repeated runs are byte-identical.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_META = {"Software": None}


def _save(fig, path):
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)


def _gray(image):
    image = np.asarray(image)
    return image[:, :, 0] if image.shape[-1] == 1 else image.mean(axis=-1)


def plot_attribution(image, pixel_map, path, title=""):
    fig = Figure(figsize=(6, 3))
    ax_img, ax_map = fig.subplots(1, 2)
    ax_img.imshow(_gray(image), cmap="gray", vmin=0, vmax=1)
    ax_img.set_title("input")
    ax_map.imshow(_gray(image), cmap="gray", vmin=0, vmax=1)
    ax_map.imshow(pixel_map, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    ax_map.set_title(title or "relevance")
    for ax in (ax_img, ax_map):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def plot_perturbation(curves, path):
    """``curves`` maps method -> {"Top Neg": PerturbationResult, ...}."""
    fig = Figure(figsize=(8, 3.2))
    axes = fig.subplots(1, 2, sharey=True)
    for ax, mode in zip(axes, ("Top", "Target")):
        for method, by_col in curves.items():
            for pol, style in (("Neg", "-"), ("Pos", "--")):
                res = by_col.get(f"{mode} {pol}")
                if res is not None:
                    ax.plot(res.fractions, res.accuracy, style, marker="o", ms=3,
                            label=f"{method} {pol.lower()}")
        ax.set_title(mode)
        ax.set_xlabel("fraction of pixels removed")
        ax.set_ylim(-0.02, 1.02)
    axes[0].set_ylabel("accuracy")
    axes[1].legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    _save(fig, path)


def plot_segmentation(rows, path):
    """``rows`` maps method -> {metric: value}."""
    methods = list(rows)
    metrics = list(next(iter(rows.values())))
    x = np.arange(len(metrics))
    width = 0.8 / max(len(methods), 1)
    fig = Figure(figsize=(6, 3.2))
    ax = fig.subplots()
    for i, m in enumerate(methods):
        ax.bar(x + i * width, [rows[m][k] for k in metrics], width, label=m)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_corner_demo(demo, path):
    fig = Figure(figsize=(9, 3))
    axes = fig.subplots(1, 3)
    panels = (
        (_gray(demo.image), "input", "gray"),
        (demo.without_std.grid, "without std scaling", "jet"),
        (demo.with_std.grid, "with std scaling", "jet"),
    )
    for ax, (data, title, cmap) in zip(axes, panels):
        ax.imshow(data, cmap=cmap)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)
