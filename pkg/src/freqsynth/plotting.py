"""Matplotlib figures written next to the CLI's delimited outputs."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}

SEGMENT_COLORS = np.array([[0, 0, 0], [200, 30, 30], [30, 180, 60]], dtype=np.uint8)


def plot_loss_curve(curve, path):
    epochs = [r.epoch for r in curve]
    fig, ax = plt.subplots(figsize=(6, 3.7))
    ax.plot(epochs, [r.loss_total for r in curve], label="total", color="k")
    ax.plot(epochs, [r.loss_overall for r in curve], label="overall L1", color="tab:blue")
    high = [r.loss_high for r in curve]
    if not all(math.isnan(h) for h in high):
        ax.plot(epochs, high, label="high-band L1", color="tab:orange")
    if any(r.loss_adv for r in curve):
        ax.plot(epochs, [r.loss_adv for r in curve], label="adversarial", color="tab:green",
                alpha=0.6)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_slice_panel(panels, path, title=None):
    """One row of axial slices; ``panels`` is a list of (label, 2D array, cmap)."""
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8))
    axes = np.atleast_1d(axes)
    for ax, (label, image, cmap) in zip(axes, panels):
        ax.imshow(image, cmap=cmap, interpolation="nearest")
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def segmentation_rgb(mask):
    return SEGMENT_COLORS[np.asarray(mask, dtype=np.intp)]
