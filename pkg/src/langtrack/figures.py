"""Matplotlib renderings written next to the delimited reports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_eval_curves(curves, out_dir, tag=""):
    """Success / precision / normalized-precision panels -> curves.png."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    panels = (
        ("Success", curves.success_thresholds, curves.success,
         "IoU threshold", f"AUC = {curves.auc:.4f}"),
        ("Precision", curves.precision_thresholds, curves.precision,
         "center error (px)", f"P@20px = {curves.p20:.4f}"),
        ("Normalized precision", curves.norm_thresholds, curves.norm_precision,
         "normalized center error", f"P_norm@0.2 = {curves.pnorm02:.4f}"),
    )
    for ax, (title, xs, ys, xlabel, note) in zip(axes, panels):
        ax.plot(xs, ys, lw=2)
        ax.set_title(f"{title} {tag}".strip())
        ax.set_xlabel(xlabel)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.annotate(note, xy=(0.97, 0.92), xycoords="axes fraction", ha="right")
    fig.tight_layout()
    path = os.path.join(out_dir, "curves.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_training_curves(records, out_dir, smooth_window=20):
    """Per-step loss traces (raw + smoothed) -> training_loss.png."""
    steps = np.array([r["step"] for r in records])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key, label in (("L_total", "total"), ("L_s", "supervised"), ("L_u", "unsupervised")):
        ys = np.array([r[key] for r in records], dtype=np.float64)
        ax1.plot(steps, ys, lw=0.6, alpha=0.35)
        if len(ys) >= smooth_window:
            kernel = np.ones(smooth_window) / smooth_window
            sm = np.convolve(ys, kernel, mode="valid")
            ax1.plot(steps[smooth_window - 1 :], sm, lw=1.8, label=label)
        else:
            ax1.plot(steps, ys, lw=1.8, label=label)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    kept = np.array([r["kept_frac"] for r in records], dtype=np.float64)
    ax2.plot(steps, kept, lw=1.0)
    ax2.set_xlabel("step")
    ax2.set_ylabel("kept fraction after denoising")
    ax2.set_ylim(-0.05, 1.05)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(out_dir, "training_loss.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
