"""RMSE metrics, bidirectional-vs-plain comparison, and plot-ready exports.

All exports are delimited text; rendering them lives in ``figures``.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

import numpy as np

from . import model as model_mod
from .errors import DataError
from .model import ForecastModel, ModelConfig, TrainConfig, TrainReport
from .preprocess import NormalizationParams, WindowedDataset


@dataclass(frozen=True)
class EvalResult:
    split: str
    model_id: str
    window_count: int
    overall_rmse_norm: float
    overall_rmse_raw: float
    per_channel_rmse_norm: dict[str, float]
    per_channel_rmse_raw: dict[str, float]


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """sqrt of the mean squared error over all entries."""
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def rmse_result(
    pred_norm: np.ndarray,
    target_norm: np.ndarray,
    norm: NormalizationParams,
    target_channels,
    split: str = "",
    model_id: str = "",
) -> EvalResult:
    """Per-channel and pooled RMSE in normalized and raw units.

    The overall RMSE pools all entries; it is not the mean of the
    per-channel values.
    """
    pred_raw = norm.denormalize(pred_norm, target_channels)
    target_raw = norm.denormalize(target_norm, target_channels)
    per_norm = {
        c: rmse(pred_norm[..., j], target_norm[..., j])
        for j, c in enumerate(target_channels)
    }
    per_raw = {
        c: rmse(pred_raw[..., j], target_raw[..., j])
        for j, c in enumerate(target_channels)
    }
    return EvalResult(
        split=split,
        model_id=model_id,
        window_count=pred_norm.shape[0] if pred_norm.ndim == 3 else 1,
        overall_rmse_norm=rmse(pred_norm, target_norm),
        overall_rmse_raw=rmse(pred_raw, target_raw),
        per_channel_rmse_norm=per_norm,
        per_channel_rmse_raw=per_raw,
    )


def predict_split(fm: ForecastModel, dataset: WindowedDataset, split: str, batch: int = 64) -> np.ndarray:
    """Normalized predictions for every window of a split."""
    x = dataset.x[split]
    if x.shape[0] == 0:
        raise DataError(f"split {split!r} is empty")
    outs = []
    for lo in range(0, x.shape[0], batch):
        out, _ = model_mod.forward_batch(fm.params, fm.cfg, x[lo : lo + batch])
        outs.append(out)
    return np.concatenate(outs, axis=0)


def evaluate_model(fm: ForecastModel, dataset: WindowedDataset, split: str) -> EvalResult:
    pred = predict_split(fm, dataset, split)
    return rmse_result(
        pred,
        dataset.y[split],
        dataset.norm,
        dataset.target_channels,
        split=split,
        model_id=fm.model_id,
    )


# ---------------------------------------------------------------------------
# Bidirectional vs plain comparison


def compare_models(
    dataset: WindowedDataset,
    cfg_bi: ModelConfig,
    cfg_uni: ModelConfig,
    tcfg: TrainConfig,
    seeds,
) -> list[dict]:
    """Train both variants per seed on identical data; test-split RMSE rows.

    Returns one row per seed plus a median aggregate row. Column names
    follow the export schema: seed, rmse_gru, rmse_bigru.
    """
    rows = []
    for seed in seeds:
        results = {}
        for label, cfg in (("rmse_bigru", cfg_bi), ("rmse_gru", cfg_uni)):
            cfg_seeded = replace(cfg, seed=int(seed))
            params = model_mod.init_model(cfg_seeded)
            tcfg_seeded = replace(tcfg, shuffle_seed=int(seed))
            best, _ = model_mod.train(params, cfg_seeded, dataset, tcfg_seeded)
            fm = ForecastModel(
                best, cfg_seeded, dataset.norm,
                dataset.feature_channels, dataset.target_channels,
            )
            results[label] = evaluate_model(fm, dataset, "test").overall_rmse_norm
        rows.append({"seed": int(seed), **results})
    rows.append(
        {
            "seed": "median",
            "rmse_gru": statistics.median(r["rmse_gru"] for r in rows),
            "rmse_bigru": statistics.median(r["rmse_bigru"] for r in rows),
        }
    )
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seed,rmse_gru,rmse_bigru\n")
        for r in rows:
            fh.write(f"{r['seed']},{float(r['rmse_gru'])!r},{float(r['rmse_bigru'])!r}\n")


# ---------------------------------------------------------------------------
# Plot-ready exports


def export_predictions(fm: ForecastModel, dataset: WindowedDataset, split: str, path) -> None:
    """CSV of true vs predicted values in raw units, time-ordered.

    One row per (window horizon step, channel); the horizon timestamps
    of consecutive windows tile time when the stride equals the horizon.
    """
    pred_norm = predict_split(fm, dataset, split)
    pred_raw = dataset.norm.denormalize(pred_norm, dataset.target_channels)
    true_raw = dataset.norm.denormalize(dataset.y[split], dataset.target_channels)
    origins = dataset.origins[split]
    lookback = dataset.config.lookback_s
    order = np.argsort(origins, kind="stable")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp_s,channel,true_value,predicted_value\n")
        for i in order:
            t0 = int(origins[i]) + lookback
            for step in range(pred_raw.shape[1]):
                for j, ch in enumerate(dataset.target_channels):
                    fh.write(
                        f"{t0 + step},{ch},{float(true_raw[i, step, j])!r},{float(pred_raw[i, step, j])!r}\n"
                    )


def export_loss_curves(report: TrainReport, path) -> None:
    """CSV with one row per epoch run: epoch, train_loss, val_loss."""
    if report.epochs_run == 0:
        raise DataError("empty training report")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, (tr, va) in enumerate(zip(report.train_losses, report.val_losses), start=1):
            fh.write(f"{i},{float(tr)!r},{float(va)!r}\n")
