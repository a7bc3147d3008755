"""Figure emission for logs and reports: objective curves, cost traces,
predicted-vs-realized strips, and per-slot mask galleries."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _decode_b64(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype=np.uint8).reshape(payload["shape"])


def read_metrics(log_path) -> tuple:
    steps, epochs = [], []
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            (epochs if "epoch_mean_total" in rec else steps).append(rec)
    return steps, epochs


def plot_metrics(log_path, out_dir) -> list:
    steps, epochs = read_metrics(log_path)
    if not steps and not epochs:
        raise ValueError(f"{log_path}: empty metrics log, nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if steps:
        ax.plot([s["total"] for s in steps], color="lightsteelblue", lw=0.6,
                label="per step")
    if epochs:
        xs = np.linspace(0, max(len(steps), 1), len(epochs))
        ax.plot(xs, [e["epoch_mean_total"] for e in epochs], color="navy",
                marker="o", ms=3, label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "objective_curve.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def plot_episode(report: dict, out_dir) -> list:
    """Cost-vs-attempt curve plus a predicted/realized strip, one column per
    recorded step."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attempts = report.get("attempts", [])
    if not attempts:
        raise ValueError("episode report has no attempts to plot")
    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([a["plan_cost"] for a in attempts], marker="o")
    ax.set_xlabel("attempt")
    ax.set_ylabel("plan cost")
    fig.tight_layout()
    p = out_dir / "cost_vs_attempt.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    n = len(attempts)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for j, att in enumerate(attempts):
        axes[0][j].imshow(_decode_b64(att["predicted_final_image"]))
        axes[0][j].set_title(f"pred {j}", fontsize=8)
        axes[1][j].imshow(_decode_b64(att["realized_image"]))
        axes[1][j].set_title(f"real {j}", fontsize=8)
        for row in axes:
            row[j].set_xticks([])
            row[j].set_yticks([])
    fig.tight_layout()
    p = out_dir / "predicted_vs_realized.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def plot_gallery(report: dict, out_dir) -> list:
    """Per-slot mask gallery: one row per slot, one column per scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gallery = report.get("gallery", [])
    if not gallery:
        raise ValueError("report carries no gallery payload")
    k = _decode_b64(gallery[0]["masks"]).shape[-1]
    n = len(gallery)
    fig, axes = plt.subplots(k + 1, n, figsize=(1.6 * n, 1.6 * (k + 1)),
                             squeeze=False)
    for j, scene in enumerate(gallery):
        axes[0][j].imshow(_decode_b64(scene["image"]))
        axes[0][j].set_title(f"scene {j}", fontsize=8)
        masks = _decode_b64(scene["masks"]).astype(np.float32) / 255.0
        for s in range(k):
            axes[s + 1][j].imshow(masks[..., s], vmin=0, vmax=1, cmap="gray")
            if j == 0:
                axes[s + 1][j].set_ylabel(f"slot {s}", fontsize=8)
        for row in axes:
            row[j].set_xticks([])
            row[j].set_yticks([])
    fig.tight_layout()
    p = out_dir / "slot_gallery.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]
