"""Cleaning, pruning, normalization, windowing, and undersampling.

The pipeline order is fixed: outlier removal -> gap segmentation ->
correlation pruning -> chronological split boundary -> min-max
normalization fitted on the training portion only -> sliding-window
supervised pairs -> train-split undersampling. Every step is a pure,
seeded function, so the same input and config reproduce the same
dataset bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensorio
from .errors import DataError
from .telemetry import CHANNELS, TelemetryFrame, TimeSeriesSegment, frames_to_arrays, arrays_to_frames

ENV_CHANNELS = (
    "pressure_hpa",
    "temp_c",
    "rh_pct",
    "co2_ppm",
    "accel_x_g",
    "accel_y_g",
    "accel_z_g",
    "mag_x_ut",
    "mag_y_ut",
    "mag_z_ut",
)

DEFAULT_TARGETS = ("pc0_3", "pc2_5", "pm2_5_ugm3")

MAD_SCALE = 1.4826  # normal-consistency constant for MAD-based z-scores

CLAMP_LO, CLAMP_HI = -0.5, 1.5  # band for out-of-train-range normalized values

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PreprocessConfig:
    outlier_mad_threshold: float = 5.0
    correlation_prune_threshold: float = 0.95
    undersample_zero_ratio: float = 1.0
    lookback_s: int = 5400
    horizon_s: int = 60
    window_stride_s: int = 60
    split_fractions: tuple[float, float, float] = (0.65, 0.10, 0.25)
    feature_channels: tuple[str, ...] = ENV_CHANNELS
    target_channels: tuple[str, ...] = DEFAULT_TARGETS
    rng_seed: int = 0

    def validate(self) -> None:
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DataError("split fractions must sum to 1")
        if min(self.lookback_s, self.horizon_s, self.window_stride_s) < 1:
            raise DataError("lookback_s, horizon_s, window_stride_s must be >= 1")
        if not self.target_channels:
            raise DataError("target_channels must be non-empty")
        for ch in tuple(self.feature_channels) + tuple(self.target_channels):
            if ch not in CHANNELS:
                raise DataError(f"unknown channel {ch!r}")


@dataclass(frozen=True)
class NormalizationParams:
    """Per-channel train-split min/max, in CHANNELS order."""

    channels: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        if np.any(self.maxs < self.mins):
            raise DataError("normalization max < min")

    def is_constant(self, channel: str) -> bool:
        i = self.channels.index(channel)
        return self.maxs[i] == self.mins[i]

    def normalize(self, values: np.ndarray, channel_names: Sequence[str]) -> np.ndarray:
        """Map raw values (..., len(channel_names)) into the fitted 0-1 scale."""
        idx = [self.channels.index(c) for c in channel_names]
        lo = self.mins[idx]
        span = self.maxs[idx] - lo
        out = np.where(span > 0.0, (values - lo) / np.where(span > 0.0, span, 1.0), 0.0)
        return np.clip(out, CLAMP_LO, CLAMP_HI)

    def denormalize(self, values: np.ndarray, channel_names: Sequence[str]) -> np.ndarray:
        idx = [self.channels.index(c) for c in channel_names]
        lo = self.mins[idx]
        span = self.maxs[idx] - lo
        return values * span + lo

    def zero_image(self, channel: str) -> float:
        """The normalized (and clamped) image of a raw 0 on this channel."""
        i = self.channels.index(channel)
        span = self.maxs[i] - self.mins[i]
        if span == 0.0:
            return 0.0
        return float(np.clip((0.0 - self.mins[i]) / span, CLAMP_LO, CLAMP_HI))

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(
            channels=tuple(d["channels"]),
            mins=np.asarray(d["mins"], dtype=np.float64),
            maxs=np.asarray(d["maxs"], dtype=np.float64),
        )


@dataclass
class WindowedDataset:
    """Supervised (lookback, horizon) pairs grouped by chronological split."""

    x: dict[str, np.ndarray]        # split -> (n, lookback_s, n_features)
    y: dict[str, np.ndarray]        # split -> (n, horizon_s, n_targets)
    origins: dict[str, np.ndarray]  # split -> (n,) window origin timestamps
    norm: NormalizationParams
    feature_channels: tuple[str, ...]
    target_channels: tuple[str, ...]
    config: PreprocessConfig
    meta: dict = field(default_factory=dict)

    def n_windows(self, split: str) -> int:
        return self.x[split].shape[0]


# ---------------------------------------------------------------------------
# Cleaning


def remove_outliers(
    frames: Sequence[TelemetryFrame], cfg: PreprocessConfig
) -> tuple[list[TelemetryFrame], int]:
    """Replace robust-z outliers with NaN, channel by channel.

    z = |x - median| / (1.4826 * MAD), pooled over all frames. Channels
    with zero MAD are skipped: a degenerate dispersion flags nothing,
    which also protects the zero-dominated particle channels from losing
    their bursts. Returns (frames, number of values flagged).
    """
    ts, vals = frames_to_arrays(frames)
    if vals.size == 0:
        return list(frames), 0
    flagged = 0
    out = vals.copy()
    for c in range(vals.shape[1]):
        col = vals[:, c]
        finite = ~np.isnan(col)
        if not finite.any():
            continue
        med = np.nanmedian(col)
        mad = np.nanmedian(np.abs(col - med))
        if mad == 0.0:
            continue
        z = np.abs(col - med) / (MAD_SCALE * mad)
        mask = finite & (z > cfg.outlier_mad_threshold)
        flagged += int(mask.sum())
        out[mask, c] = np.nan
    return arrays_to_frames(ts, out), flagged


def segment(frames: Sequence[TelemetryFrame]) -> list[TimeSeriesSegment]:
    """Collapse duplicate timestamps by mean, drop NaN frames, split on gaps."""
    ts, vals = frames_to_arrays(frames)
    if len(ts) == 0:
        return []
    # Duplicates are adjacent because frames are timestamp-sorted.
    uniq, start_idx = np.unique(ts, return_index=True)
    if len(uniq) != len(ts):
        collapsed = np.empty((len(uniq), vals.shape[1]))
        bounds = np.append(start_idx, len(ts))
        for i in range(len(uniq)):
            collapsed[i] = vals[bounds[i]:bounds[i + 1]].mean(axis=0)
        ts, vals = uniq, collapsed

    clean = ~np.isnan(vals).any(axis=1)
    ts, vals = ts[clean], vals[clean]
    if len(ts) == 0:
        return []

    segments = []
    breaks = np.flatnonzero(np.diff(ts) != 1) + 1
    for lo, hi in zip(np.append(0, breaks), np.append(breaks, len(ts))):
        segments.append(TimeSeriesSegment(start_s=int(ts[lo]), values=vals[lo:hi].copy()))
    return segments


# ---------------------------------------------------------------------------
# Feature pruning


def prune_correlated(
    segments: Sequence[TimeSeriesSegment], cfg: PreprocessConfig
) -> tuple[list[str], list[tuple[str, str]]]:
    """Drop the later-listed channel of any feature pair with |rho| > threshold.

    Pearson correlation is pooled across segments; constant channels
    correlate 0 with everything. Channels that are also targets are never
    dropped. Returns (kept, [(dropped, partner_that_caused_it), ...]).
    """
    feats = list(cfg.feature_channels)
    idx = [CHANNELS.index(c) for c in feats]
    pooled = np.concatenate([s.values[:, idx] for s in segments], axis=0)
    if pooled.shape[0] < 2:
        raise DataError("need at least 2 pooled samples for correlation pruning")

    std = pooled.std(axis=0)
    centered = pooled - pooled.mean(axis=0)
    denom = np.outer(std, std) * pooled.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0.0, centered.T @ centered / np.where(denom > 0.0, denom, 1.0), 0.0)

    protected = set(cfg.target_channels)
    dropped: list[tuple[str, str]] = []
    dead: set[int] = set()
    for i in range(len(feats)):
        if i in dead:
            continue
        for j in range(i + 1, len(feats)):
            if j in dead or feats[j] in protected:
                continue
            if abs(rho[i, j]) > cfg.correlation_prune_threshold:
                dead.add(j)
                dropped.append((feats[j], feats[i]))
    kept = [f for k, f in enumerate(feats) if k not in dead]
    return kept, dropped


# ---------------------------------------------------------------------------
# Windows and splits


def enumerate_window_origins(
    segments: Sequence[TimeSeriesSegment], cfg: PreprocessConfig
) -> list[tuple[int, int, int]]:
    """All (segment_index, offset, origin_timestamp), chronological by origin.

    Per segment of length L the window count is
    floor((L - lookback - horizon) / stride) + 1, or zero when L is too
    short.
    """
    out = []
    need = cfg.lookback_s + cfg.horizon_s
    for si, seg in enumerate(segments):
        L = len(seg)
        if L < need:
            continue
        n = (L - need) // cfg.window_stride_s + 1
        for k in range(n):
            off = k * cfg.window_stride_s
            out.append((si, off, seg.start_s + off))
    out.sort(key=lambda t: t[2])
    return out


def split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_trainval = int(round((fractions[0] + fractions[1]) * n))
    n_val = max(n_trainval - n_train, 0)
    return n_train, n_val, n - n_train - n_val


def train_fit_end_timestamp(
    segments: Sequence[TimeSeriesSegment], cfg: PreprocessConfig
) -> int:
    """Last timestamp belonging to the training portion of the split.

    The training portion ends where the last train-split window ends;
    normalization must not see anything later (leakage guard).
    """
    origins = enumerate_window_origins(segments, cfg)
    if not origins:
        raise DataError(
            f"no segment long enough for one window "
            f"(need lookback {cfg.lookback_s} + horizon {cfg.horizon_s} = "
            f"{cfg.lookback_s + cfg.horizon_s} consecutive seconds)"
        )
    n_train, _, _ = split_counts(len(origins), cfg.split_fractions)
    if n_train == 0:
        raise DataError("training split is empty")
    last_train_origin = origins[n_train - 1][2]
    return last_train_origin + cfg.lookback_s + cfg.horizon_s - 1


def normalize(
    segments: Sequence[TimeSeriesSegment],
    cfg: PreprocessConfig,
    fit_end_timestamp_s: int,
) -> tuple[list[TimeSeriesSegment], NormalizationParams, int]:
    """Min-max normalize every channel, fitted on train-portion rows only.

    Values outside the fitted range (possible in val/test) are clamped to
    [-0.5, 1.5]. Constant channels map to 0. Returns (segments, params,
    number of clamped entries).
    """
    if not segments:
        raise DataError("no segments to normalize")
    train_rows = [
        s.values[: max(0, min(len(s), fit_end_timestamp_s - s.start_s + 1))]
        for s in segments
    ]
    pooled = np.concatenate([r for r in train_rows if r.shape[0] > 0], axis=0) \
        if any(r.shape[0] > 0 for r in train_rows) else np.empty((0, len(CHANNELS)))
    if pooled.shape[0] == 0:
        raise DataError("empty training portion: nothing to fit normalization on")

    mins = pooled.min(axis=0)
    maxs = pooled.max(axis=0)
    params = NormalizationParams(channels=CHANNELS, mins=mins, maxs=maxs)

    span = maxs - mins
    clamped = 0
    out = []
    for s in segments:
        with np.errstate(invalid="ignore"):
            norm = np.where(span > 0.0, (s.values - mins) / np.where(span > 0.0, span, 1.0), 0.0)
        clamped += int(((norm < CLAMP_LO) | (norm > CLAMP_HI)).sum())
        out.append(TimeSeriesSegment(start_s=s.start_s, values=np.clip(norm, CLAMP_LO, CLAMP_HI)))
    return out, params, clamped


def make_windows(
    segments: Sequence[TimeSeriesSegment],
    cfg: PreprocessConfig,
    norm: NormalizationParams,
    feature_channels: Sequence[str] | None = None,
) -> WindowedDataset:
    """Cut normalized segments into supervised pairs and split chronologically.

    Windows never span a segment boundary. Split assignment orders all
    windows by origin timestamp: earliest 65% train, next 10% val, last
    25% test (per cfg.split_fractions).
    """
    feats = tuple(feature_channels) if feature_channels is not None else cfg.feature_channels
    fi = [CHANNELS.index(c) for c in feats]
    ti = [CHANNELS.index(c) for c in cfg.target_channels]

    origins = enumerate_window_origins(segments, cfg)
    n = len(origins)
    n_train, n_val, n_test = split_counts(n, cfg.split_fractions)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    xs = {s: [] for s in SPLITS}
    ys = {s: [] for s in SPLITS}
    os_ = {s: [] for s in SPLITS}
    for (si, off, origin), label in zip(origins, labels):
        seg = segments[si]
        xs[label].append(seg.values[off : off + cfg.lookback_s, fi])
        ys[label].append(
            seg.values[off + cfg.lookback_s : off + cfg.lookback_s + cfg.horizon_s, ti]
        )
        os_[label].append(origin)

    x = {
        s: np.stack(xs[s]) if xs[s] else np.empty((0, cfg.lookback_s, len(feats)))
        for s in SPLITS
    }
    y = {
        s: np.stack(ys[s]) if ys[s] else np.empty((0, cfg.horizon_s, len(ti)))
        for s in SPLITS
    }
    origins_arr = {s: np.asarray(os_[s], dtype=np.int64) for s in SPLITS}
    return WindowedDataset(
        x=x,
        y=y,
        origins=origins_arr,
        norm=norm,
        feature_channels=feats,
        target_channels=tuple(cfg.target_channels),
        config=cfg,
        meta={},
    )


def undersample(dataset: WindowedDataset, cfg: PreprocessConfig) -> WindowedDataset:
    """Drop excess all-zero-target train windows; val/test untouched.

    A window is "zero" when every horizon entry equals the normalized
    image of raw 0 on its channel. Retained zero windows are chosen by a
    seeded draw so that retained <= ratio * nonzero count (at most one
    when there is no nonzero window). Survivor order is preserved.
    """
    y = dataset.y["train"]
    n = y.shape[0]
    if n == 0:
        return dataset
    zero_img = np.array([dataset.norm.zero_image(c) for c in dataset.target_channels])
    is_zero = np.all(y == zero_img[None, None, :], axis=(1, 2))
    zero_idx = np.flatnonzero(is_zero)
    n_nonzero = n - len(zero_idx)

    if math.isinf(cfg.undersample_zero_ratio):
        keep_zero = len(zero_idx)
    elif n_nonzero == 0:
        keep_zero = min(1, len(zero_idx))
    else:
        keep_zero = min(len(zero_idx), int(cfg.undersample_zero_ratio * n_nonzero))

    rng = np.random.default_rng(cfg.rng_seed)
    chosen = rng.choice(len(zero_idx), size=keep_zero, replace=False) if len(zero_idx) else []
    keep = np.ones(n, dtype=bool)
    keep[zero_idx] = False
    keep[zero_idx[np.sort(np.asarray(chosen, dtype=np.int64))]] = True

    out = WindowedDataset(
        x=dict(dataset.x),
        y=dict(dataset.y),
        origins=dict(dataset.origins),
        norm=dataset.norm,
        feature_channels=dataset.feature_channels,
        target_channels=dataset.target_channels,
        config=dataset.config,
        meta=dict(dataset.meta),
    )
    out.x["train"] = dataset.x["train"][keep]
    out.y["train"] = dataset.y["train"][keep]
    out.origins["train"] = dataset.origins["train"][keep]
    out.meta["undersample"] = {
        "zero_windows": int(len(zero_idx)),
        "nonzero_windows": int(n_nonzero),
        "zero_retained": int(keep_zero),
    }
    return out


# ---------------------------------------------------------------------------
# End-to-end pipeline and persistence


def run_pipeline(
    frames: Sequence[TelemetryFrame], cfg: PreprocessConfig
) -> WindowedDataset:
    """The full chain, in the documented order, with a decision trail in meta."""
    cfg.validate()
    frames, flagged = remove_outliers(frames, cfg)
    segments = segment(frames)
    if not segments:
        raise DataError("no gap-free segments after cleaning")
    kept, dropped = prune_correlated(segments, cfg)
    fit_end = train_fit_end_timestamp(segments, cfg)
    segments, norm, clamped = normalize(segments, cfg, fit_end)
    dataset = make_windows(segments, cfg, norm, feature_channels=kept)
    dataset.meta.update(
        {
            "outliers_flagged": flagged,
            "segments": len(segments),
            "dropped_channels": [{"channel": c, "partner": p} for c, p in dropped],
            "clamped_values": clamped,
            "fit_end_timestamp_s": fit_end,
            "window_counts_before_undersample": {s: int(dataset.n_windows(s)) for s in SPLITS},
        }
    )
    dataset = undersample(dataset, cfg)
    dataset.meta["window_counts"] = {s: int(dataset.n_windows(s)) for s in SPLITS}
    return dataset


def save_dataset(dataset: WindowedDataset, out_dir) -> None:
    """Persist as meta.json plus one binary tensor file per split."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "config": _config_to_dict(dataset.config),
        "feature_channels": list(dataset.feature_channels),
        "target_channels": list(dataset.target_channels),
        "norm": dataset.norm.to_dict(),
        "split_sizes": {s: int(dataset.n_windows(s)) for s in SPLITS},
        **dataset.meta,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for s in SPLITS:
        with open(os.path.join(out_dir, f"{s}.bin"), "wb") as fh:
            tensorio.write_tensor(fh, dataset.x[s])
            tensorio.write_tensor(fh, dataset.y[s])
            tensorio.write_tensor(fh, dataset.origins[s].astype(np.float64))


def load_dataset(in_dir) -> WindowedDataset:
    with open(os.path.join(in_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = _config_from_dict(meta["config"])
    norm = NormalizationParams.from_dict(meta["norm"])
    x, y, origins = {}, {}, {}
    for s in SPLITS:
        with open(os.path.join(in_dir, f"{s}.bin"), "rb") as fh:
            x[s] = tensorio.read_tensor(fh)
            y[s] = tensorio.read_tensor(fh)
            origins[s] = tensorio.read_tensor(fh).astype(np.int64)
    extras = {
        k: v
        for k, v in meta.items()
        if k not in ("config", "feature_channels", "target_channels", "norm", "split_sizes")
    }
    return WindowedDataset(
        x=x,
        y=y,
        origins=origins,
        norm=norm,
        feature_channels=tuple(meta["feature_channels"]),
        target_channels=tuple(meta["target_channels"]),
        config=cfg,
        meta=extras,
    )


def _config_to_dict(cfg: PreprocessConfig) -> dict:
    d = asdict(cfg)
    d["split_fractions"] = list(cfg.split_fractions)
    d["feature_channels"] = list(cfg.feature_channels)
    d["target_channels"] = list(cfg.target_channels)
    return d


def _config_from_dict(d: dict) -> PreprocessConfig:
    return PreprocessConfig(
        outlier_mad_threshold=d["outlier_mad_threshold"],
        correlation_prune_threshold=d["correlation_prune_threshold"],
        undersample_zero_ratio=d["undersample_zero_ratio"],
        lookback_s=d["lookback_s"],
        horizon_s=d["horizon_s"],
        window_stride_s=d["window_stride_s"],
        split_fractions=tuple(d["split_fractions"]),
        feature_channels=tuple(d["feature_channels"]),
        target_channels=tuple(d["target_channels"]),
        rng_seed=d["rng_seed"],
    )
