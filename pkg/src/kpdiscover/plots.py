"""Figure rendering for runs: loss curves, keypoint overlays, PR curves."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .training import read_inference_csv
from .video_io import load_sequence

AGENT_COLORS = plt.get_cmap("tab10").colors


def _atomic_save(fig, path: str) -> None:
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def plot_losses(run_dir: str, out_path: str | None = None) -> str:
    """Loss curves from a run's losses.csv; returns the PNG path."""
    csv_path = os.path.join(run_dir, "losses.csv")
    if not os.path.exists(csv_path):
        raise FileNotFoundError(f"no losses.csv in {run_dir}")
    steps, series = [], {"recon": [], "rot": [], "sep": [], "total": []}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for key in series:
                series[key].append(float(row[key]))
    if not steps:
        raise ValueError(f"losses.csv in {run_dir} is empty")

    fig, ax = plt.subplots(figsize=(7, 4))
    for key, values in series.items():
        ax.plot(steps, values, label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title(os.path.basename(os.path.normpath(run_dir)))
    out_path = out_path or os.path.join(run_dir, "losses.png")
    _atomic_save(fig, out_path)
    return out_path


def plot_overlays(
    frames_dir: str,
    pred_csv: str,
    out_dir: str,
    resolution: int,
    max_frames: int = 4,
) -> list[tuple[str, int]]:
    """Keypoint dots on frames; returns (path, dots_drawn) per figure."""
    preds = read_inference_csv(pred_csv)
    if not preds:
        raise ValueError(f"no predictions in {pred_csv}")
    frames = load_sequence(frames_dir, resolution)
    by_index = {f.index: f for f in frames}
    os.makedirs(out_dir, exist_ok=True)

    outputs = []
    for t in sorted(preds)[:max_frames]:
        frame = by_index.get(t)
        if frame is None:
            continue
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(frame.pixels)
        dots = 0
        for slot, (agent_id, entry) in enumerate(sorted(preds[t].items())):
            xy = np.asarray(entry["xy"])
            color = AGENT_COLORS[slot % len(AGENT_COLORS)]
            ax.scatter(xy[:, 0], xy[:, 1], s=28, color=color, edgecolors="white",
                       linewidths=0.6, label=f"agent {agent_id}")
            dots += len(xy)
        ax.legend(frameon=False, fontsize=7, loc="upper right")
        ax.set_axis_off()
        ax.set_title(f"frame {t}")
        path = os.path.join(out_dir, f"overlay_{t:06d}.png")
        _atomic_save(fig, path)
        outputs.append((path, dots))
    return outputs


def plot_pr_curves(curves: dict, out_path: str) -> str:
    """Precision-recall curves per class from {name: (precision, recall)}."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, (precision, recall) in curves.items():
        ax.plot(recall, precision, marker=".", markersize=3, label=str(name))
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    _atomic_save(fig, out_path)
    return out_path
