"""Matplotlib rendering of fit reports: mask overlays, loss curves,
per-frame metric plots."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .losses import TERM_NAMES, LossBreakdown
from .masks import MaskImage


def save_overlay(target: MaskImage, rendered: MaskImage, occlusion: MaskImage,
                 path, title: str = "") -> None:
    """Composite: target mask in red, rendered mask in green, occlusion in
    blue; overlap of target and render shows yellow."""
    h, w = target.values.shape
    rgb = np.zeros((h, w, 3))
    rgb[..., 0] = target.values
    rgb[..., 1] = rendered.values
    rgb[..., 2] = 0.5 * occlusion.values
    fig, ax = plt.subplots(figsize=(w / 100, h / 100), dpi=100)
    ax.imshow(rgb)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_loss_curves(trace: list[LossBreakdown], steps_per_stage: int, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 5))
    steps = np.arange(len(trace))
    for name in TERM_NAMES:
        vals = np.array([b.terms[name] for b in trace])
        if np.any(vals != 0):
            ax.plot(steps, vals, label=name, linewidth=1)
    ax.plot(steps, [b.total for b in trace], label="total", color="black",
            linewidth=2)
    if len(trace) > steps_per_stage:
        ax.axvline(steps_per_stage, color="gray", linestyle="--", linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_metric_curves(per_frame: dict[str, list[float]], path) -> None:
    keys = [k for k, v in per_frame.items()
            if isinstance(v, list) and v and isinstance(v[0], (int, float))]
    if not keys:
        return
    fig, axes = plt.subplots(len(keys), 1, figsize=(7, 2 * len(keys)),
                             squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        ax.plot(per_frame[key], marker="o", markersize=3)
        ax.set_ylabel(key, fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
