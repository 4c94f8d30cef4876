"""Render the report CSVs to PNG figures.

The report module emits delimited data only; this module turns those
files (or the in-memory equivalents) into figures next to them. Used by
the CLI report path; headless-safe via the Agg backend.
"""

from __future__ import annotations

import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_loss_curves(loss_csv_path, out_png_path) -> None:
    """Train/val loss per epoch from an export_loss_curves CSV."""
    epochs, train, val = [], [], []
    with open(loss_csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            train.append(float(row["train_loss"]))
            val.append(float(row["val_loss"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train, label="train")
    ax.plot(epochs, val, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE loss")
    ax.set_title("Model loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png_path, dpi=120)
    plt.close(fig)


def render_predictions(pred_csv_path, out_png_path, channel: str | None = None) -> None:
    """True (blue line) vs predicted (red dotted) from export_predictions.

    One subplot per channel unless a single channel is requested.
    """
    series: dict[str, list[tuple[int, float, float]]] = defaultdict(list)
    with open(pred_csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            series[row["channel"]].append(
                (int(row["timestamp_s"]), float(row["true_value"]), float(row["predicted_value"]))
            )
    channels = [channel] if channel else sorted(series)
    fig, axes = plt.subplots(len(channels), 1, figsize=(8, 2.5 * len(channels)), squeeze=False)
    for ax, ch in zip(axes[:, 0], channels):
        pts = sorted(series[ch])
        ts = [p[0] for p in pts]
        ax.plot(ts, [p[1] for p in pts], color="tab:blue", label="true")
        ax.plot(ts, [p[2] for p in pts], color="tab:red", linestyle=":", label="predicted")
        ax.set_ylabel(ch)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("timestamp (s)")
    fig.tight_layout()
    fig.savefig(out_png_path, dpi=120)
    plt.close(fig)
