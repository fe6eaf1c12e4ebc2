"""Figure rendering for reports. Everything writes straight to files (Agg backend)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale=1.0, ratio=None, width_in=6.5):
    if ratio is None:
        ratio = (math.sqrt(5.0) - 1.0) / 2.0
    w = width_in * scale
    return (w, w * ratio)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _scatter_by_label(ax, points, labels):
    names = sorted(set(np.asarray(labels).tolist()))
    cmap = plt.get_cmap("tab10" if len(names) <= 10 else "tab20")
    for i, name in enumerate(names):
        sel = np.asarray(labels) == name
        ax.scatter(points[sel, 0], points[sel, 1], s=10, alpha=0.75, color=cmap(i % cmap.N), label=name,
                   linewidths=0)
    ax.set_xticks([])
    ax.set_yticks([])


def plot_tsne_panels(panels: Sequence[tuple], path):
    """One t-SNE scatter per (title, points [N, 2], labels) panel, side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=figsize(1.0, ratio=0.45 if len(panels) > 1 else 0.9,
                                                                 width_in=3.4 * len(panels)), squeeze=False)
        for ax, (title, points, labels) in zip(axes[0], panels):
            _scatter_by_label(ax, np.asarray(points), labels)
            ax.set_title(title)
        handles, names = axes[0][0].get_legend_handles_labels()
        fig.legend(handles, names, loc="lower center", ncol=min(len(names), 6), frameon=False,
                   bbox_to_anchor=(0.5, -0.02))
        fig.tight_layout(rect=(0, 0.06, 1, 1))
        return _save(fig, path)


def plot_training_log(log_path, path, val_log_path=None):
    """Loss curves from a JSON-lines training log."""
    rows = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"empty training log {log_path}")
    steps = np.array([r["step"] for r in rows])
    with plt.rc_context(STYLE):
        fig, (ax_g, ax_d) = plt.subplots(1, 2, figsize=figsize(1.0, ratio=0.4))
        for key in ("l_rec", "l_rf_g", "l_sim_g", "total_g"):
            ax_g.plot(steps, [r[key] for r in rows], label=key, lw=0.8)
        for key in ("l_rf_d", "l_cvt_d", "l_e_d", "total_d"):
            ax_d.plot(steps, [r[key] for r in rows], label=key, lw=0.8)
        if val_log_path and Path(val_log_path).exists():
            val = [json.loads(line) for line in Path(val_log_path).read_text().splitlines() if line.strip()]
            if val:
                ax_g.plot([v["step"] for v in val], [v["val_l_rec"] for v in val], "k--", lw=0.8,
                          label="val l_rec")
        ax_g.set_title("generator")
        ax_d.set_title("discriminators")
        for ax in (ax_g, ax_d):
            ax.set_xlabel("step")
            ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_eval_pairs(rows: Sequence[dict], path):
    """Per-utterance metric strips for an evaluation run."""
    keys = ("mcd_db", "cos_sim", "energy_rmse", "f0_rmse")
    titles = ("MCD (dB)", "COS-SIM", "Energy RMSE", "F0 RMSE")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=figsize(1.0, ratio=0.3))
        for ax, key, title in zip(axes, keys, titles):
            vals = np.array([r[key] for r in rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            jitter = np.random.default_rng(0).uniform(-0.15, 0.15, vals.size)
            ax.scatter(jitter, vals, s=12, alpha=0.7)
            if vals.size:
                ax.axhline(vals.mean(), color="k", lw=0.8)
            ax.set_xlim(-0.5, 0.5)
            ax.set_xticks([])
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_mel_comparison(mels: Sequence[tuple], path):
    """Stacked log-mel images, one per (title, [T, n_mels]) entry."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(mels), 1, figsize=figsize(1.0, ratio=0.25 * len(mels)), squeeze=False)
        for ax, (title, mel) in zip(axes[:, 0], mels):
            ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(title)
            ax.set_ylabel("mel bin")
        axes[-1, 0].set_xlabel("frame")
        fig.tight_layout()
        return _save(fig, path)
