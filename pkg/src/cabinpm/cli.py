"""The ``cabinpm`` command line: gen, prep, train, eval, predict, monitor, retrain.

Configuration comes from an optional JSON file (--config) whose sections
mirror the module configs; command-line flags override file values.
Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import figures, report
from .errors import DataError, UsageError
from .ews import Monitor, ThresholdConfig
from .model import ForecastModel, ModelConfig, TrainConfig, init_model, train
from .preprocess import (
    PreprocessConfig,
    load_dataset,
    run_pipeline,
    save_dataset,
)
from .telemetry import (
    CSV_HEADER,
    SynthConfig,
    TelemetryFrame,
    generate_synthetic,
    read_csv,
    write_csv,
)

CONFIG_SECTIONS = ("synth", "preprocess", "model", "train", "thresholds", "paths")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(dc_type, section: dict | None, overrides: dict):
    """Dataclass from config-file section plus non-None CLI overrides."""
    fields = {f.name for f in dataclasses.fields(dc_type)}
    kwargs = {}
    if section:
        unknown = set(section) - fields
        if unknown:
            raise UsageError(f"unknown {dc_type.__name__} keys: {sorted(unknown)}")
        kwargs.update(section)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    if "split_fractions" in kwargs:
        kwargs["split_fractions"] = tuple(kwargs["split_fractions"])
    for key in ("feature_channels", "target_channels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return dc_type(**kwargs)


def _bool_flag(value: str) -> bool:
    v = value.lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args, config) -> int:
    if args.hours is not None and args.hours <= 0:
        raise UsageError("--hours must be positive")
    duration = args.duration_s
    if args.hours is not None:
        duration = int(round(args.hours * 3600))
    scfg = _build(
        SynthConfig,
        config.get("synth"),
        {
            "seed": args.seed,
            "duration_s": duration,
            "event_rate_per_hour": args.event_rate,
            "duplicate_rate_per_hour": args.duplicates_per_hour,
        },
    )
    frames = generate_synthetic(scfg)
    write_csv(frames, args.out)
    _say(args, f"wrote {len(frames)} frames to {args.out}")
    return 0


def _preprocess_config(args, config) -> PreprocessConfig:
    return _build(
        PreprocessConfig,
        config.get("preprocess"),
        {
            "lookback_s": getattr(args, "lookback", None),
            "horizon_s": getattr(args, "horizon", None),
            "window_stride_s": getattr(args, "stride", None),
            "rng_seed": args.seed,
        },
    )


def cmd_prep(args, config) -> int:
    pcfg = _preprocess_config(args, config)
    frames = read_csv(args.in_csv)
    dataset = run_pipeline(frames, pcfg)
    save_dataset(dataset, args.out_dir)
    counts = dataset.meta["window_counts"]
    _say(
        args,
        f"windows: train={counts['train']} val={counts['val']} test={counts['test']}; "
        f"outliers flagged={dataset.meta['outliers_flagged']}; "
        f"dropped channels={[d['channel'] for d in dataset.meta['dropped_channels']]}",
    )
    return 0


def _model_config(args, config, dataset) -> ModelConfig:
    return _build(
        ModelConfig,
        config.get("model"),
        {
            "feature_dim": len(dataset.feature_channels),
            "target_dim": len(dataset.target_channels),
            "lookback": dataset.config.lookback_s,
            "horizon": dataset.config.horizon_s,
            "bidirectional": getattr(args, "bidirectional", None),
            "enc_hidden": getattr(args, "enc_hidden", None),
            "dec_hidden": getattr(args, "dec_hidden", None),
            "head_hidden": getattr(args, "head_hidden", None),
            "seed": args.seed,
        },
    )


def _train_config(args, config) -> TrainConfig:
    return _build(
        TrainConfig,
        config.get("train"),
        {
            "epochs": getattr(args, "epochs", None),
            "batch_size": getattr(args, "batch_size", None),
            "alpha": getattr(args, "lr", None),
            "patience": getattr(args, "patience", None),
            "clip_norm": getattr(args, "clip_norm", None),
            "shuffle_seed": args.seed,
        },
    )


def _train_on(dataset, mcfg, tcfg):
    params = init_model(mcfg)
    best, rep = train(params, mcfg, dataset, tcfg)
    fm = ForecastModel(
        best, mcfg, dataset.norm, dataset.feature_channels, dataset.target_channels
    )
    return fm, rep


def cmd_train(args, config) -> int:
    dataset = load_dataset(args.dataset)
    mcfg = _model_config(args, config, dataset)
    tcfg = _train_config(args, config)
    fm, rep = _train_on(dataset, mcfg, tcfg)
    model_id = fm.save(args.out)
    loss_csv = os.path.splitext(args.out)[0] + "_loss.csv"
    report.export_loss_curves(rep, loss_csv)
    if not args.no_figures:
        figures.render_loss_curves(loss_csv, os.path.splitext(args.out)[0] + "_loss.png")
    _say(
        args,
        f"model {model_id}: {rep.epochs_run} epochs, best epoch {rep.best_epoch + 1}, "
        f"final train loss {rep.train_losses[-1]:.6g}, "
        f"best val loss {rep.val_losses[rep.best_epoch]:.6g}",
    )
    return 0


def _check_dims(fm: ForecastModel, dataset) -> None:
    got = dataset.x["test"].shape[1:] if dataset.x["test"].size else dataset.x["train"].shape[1:]
    want = (fm.cfg.lookback, fm.cfg.feature_dim)
    if tuple(got) != want:
        raise DataError(
            f"checkpoint expects windows {want}, dataset provides {tuple(got)}"
        )


def cmd_eval(args, config) -> int:
    fm = ForecastModel.load(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _check_dims(fm, dataset)
    os.makedirs(args.out_dir, exist_ok=True)

    result = report.evaluate_model(fm, dataset, args.split)
    rmse_csv = os.path.join(args.out_dir, "rmse.csv")
    with open(rmse_csv, "w", encoding="utf-8") as fh:
        fh.write("channel,rmse_norm,rmse_raw\n")
        for ch in dataset.target_channels:
            fh.write(
                f"{ch},{float(result.per_channel_rmse_norm[ch])!r},{float(result.per_channel_rmse_raw[ch])!r}\n"
            )
        fh.write(f"overall,{float(result.overall_rmse_norm)!r},{float(result.overall_rmse_raw)!r}\n")

    pred_csv = os.path.join(args.out_dir, "predictions.csv")
    report.export_predictions(fm, dataset, args.split, pred_csv)
    if not args.no_figures:
        figures.render_predictions(pred_csv, os.path.join(args.out_dir, "predictions.png"))

    if args.baseline_checkpoint:
        other = ForecastModel.load(args.baseline_checkpoint)
        _check_dims(other, dataset)
        other_result = report.evaluate_model(other, dataset, args.split)
        cmp_csv = os.path.join(args.out_dir, "comparison.csv")
        with open(cmp_csv, "w", encoding="utf-8") as fh:
            fh.write("model_id,rmse_norm,rmse_raw\n")
            for r in (result, other_result):
                fh.write(f"{r.model_id},{float(r.overall_rmse_norm)!r},{float(r.overall_rmse_raw)!r}\n")

    _say(
        args,
        f"{args.split} RMSE (normalized) {result.overall_rmse_norm:.6g}, "
        f"(raw) {result.overall_rmse_raw:.6g}; outputs in {args.out_dir}",
    )
    return 0


def cmd_predict(args, config) -> int:
    fm = ForecastModel.load(args.checkpoint)
    frames = read_csv(args.in_csv)
    if len(frames) < fm.cfg.lookback:
        raise DataError(
            f"need at least {fm.cfg.lookback} frames for one lookback window, got {len(frames)}"
        )
    feat_idx = [CSV_HEADER.index(c) - 1 for c in fm.feature_channels]
    window = np.stack([f.channel_values()[feat_idx] for f in frames[-fm.cfg.lookback :]])
    if np.isnan(window).any():
        raise DataError("lookback window contains missing values")
    pred = fm.predict(window)
    t0 = frames[-1].timestamp_s + 1
    out = sys.stdout if args.out is None else open(args.out, "w", encoding="utf-8")
    try:
        out.write("timestamp_s," + ",".join(fm.target_channels) + "\n")
        for step in range(pred.shape[0]):
            cells = ",".join(repr(float(v)) for v in pred[step])
            out.write(f"{t0 + step},{cells}\n")
    finally:
        if args.out is not None:
            out.close()
    return 0


def _iter_stream_frames(fh):
    """Yield TelemetryFrame from a CSV stream, tolerating bad rows."""
    import csv as _csv
    from .errors import SchemaError

    reader = _csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise SchemaError("stream header does not match the canonical schema")
    for row in reader:
        if len(row) != len(CSV_HEADER):
            yield None
            continue
        try:
            ts = int(row[0])
        except ValueError:
            yield None
            continue
        vals = np.empty(len(CSV_HEADER) - 1)
        for i, cell in enumerate(row[1:]):
            try:
                vals[i] = float(cell) if cell != "" else np.nan
            except ValueError:
                vals[i] = np.nan
        yield TelemetryFrame.from_channel_values(ts, vals)


def cmd_monitor(args, config) -> int:
    fm = ForecastModel.load(args.checkpoint)
    tcfg = _build(
        ThresholdConfig,
        config.get("thresholds"),
        {
            "pm25_mass_limit_ugm3": args.pm25_limit,
            "pm03_count_limit_per_dl": args.pc03_limit,
            "clear_hysteresis_steps": args.hysteresis,
        },
    )
    sinks = [sys.stdout]
    sink_fh = None
    if args.sink_file:
        sink_fh = open(args.sink_file, "a", encoding="utf-8")
        sinks.append(sink_fh)
    monitor = Monitor(fm, tcfg, prediction_cadence_s=args.cadence, sinks=sinks)

    stream = sys.stdin if args.in_path == "-" else open(args.in_path, encoding="utf-8")
    bad_rows = 0
    try:
        for frame in _iter_stream_frames(stream):
            if frame is None:
                bad_rows += 1
                continue
            monitor.tick(frame)
            if args.replay_speed > 0:
                time.sleep(1.0 / args.replay_speed)
    finally:
        if stream is not sys.stdin:
            stream.close()
        if sink_fh is not None:
            sink_fh.close()

    summary = monitor.summary()
    summary["unparsable_rows"] = bad_rows
    _say(args, "summary: " + json.dumps(summary))
    return 0


def cmd_retrain(args, config) -> int:
    old = ForecastModel.load(args.checkpoint)
    frames = read_csv(args.data)
    pcfg = _build(
        PreprocessConfig,
        config.get("preprocess"),
        {
            "lookback_s": old.cfg.lookback,
            "horizon_s": old.cfg.horizon,
            "feature_channels": old.feature_channels,
            "target_channels": old.target_channels,
            # Pruning is disabled on retrain: the channel set is pinned
            # by the deployed checkpoint.
            "correlation_prune_threshold": 1.0,
            "rng_seed": args.seed,
        },
    )
    dataset = run_pipeline(frames, pcfg)
    if tuple(dataset.feature_channels) != old.feature_channels:
        raise DataError(
            f"retrain data features {dataset.feature_channels} do not match "
            f"checkpoint features {old.feature_channels}"
        )
    mcfg = dataclasses.replace(old.cfg, seed=args.seed if args.seed is not None else old.cfg.seed)
    tcfg = _train_config(args, config)
    fm, _ = _train_on(dataset, mcfg, tcfg)
    new_id = fm.save(args.out)

    old_rmse = _raw_rmse_on(old, dataset)
    new_rmse = _raw_rmse_on(fm, dataset)
    _say(
        args,
        f"retrained {old.model_id} -> {new_id}; "
        f"test RMSE (raw units) old {old_rmse:.6g} vs new {new_rmse:.6g}",
    )
    return 0


def _raw_rmse_on(fm: ForecastModel, dataset) -> float:
    """Raw-unit test RMSE, usable across models with different norms."""
    x = dataset.norm.denormalize(dataset.x["test"], dataset.feature_channels)
    truth = dataset.norm.denormalize(dataset.y["test"], dataset.target_channels)
    preds = np.stack([fm.predict(w) for w in x])
    return report.rmse(preds, truth)


# ---------------------------------------------------------------------------
# Parser wiring


def build_parser() -> _Parser:
    p = _Parser(prog="cabinpm", description="Cabin particulate forecasting and early warning")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="override every seed in play")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic telemetry CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--hours", type=float, default=None)
    g.add_argument("--duration-s", type=int, default=None, dest="duration_s")
    g.add_argument("--event-rate", type=float, default=None, dest="event_rate",
                   help="acceleration spike events per hour")
    g.add_argument("--duplicates-per-hour", type=float, default=None, dest="duplicates_per_hour")
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prep", help="preprocess a telemetry CSV into a windowed dataset")
    pr.add_argument("--in", required=True, dest="in_csv")
    pr.add_argument("--out-dir", required=True, dest="out_dir")
    pr.add_argument("--lookback", type=int, default=None)
    pr.add_argument("--horizon", type=int, default=None)
    pr.add_argument("--stride", type=int, default=None)
    pr.set_defaults(func=cmd_prep)

    tr = sub.add_parser("train", help="train a forecaster on a prepared dataset")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--bidirectional", type=_bool_flag, default=None)
    tr.add_argument("--enc-hidden", type=int, default=None, dest="enc_hidden")
    tr.add_argument("--dec-hidden", type=int, default=None, dest="dec_hidden")
    tr.add_argument("--head-hidden", type=int, default=None, dest="head_hidden")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--patience", type=int, default=None)
    tr.add_argument("--clip-norm", type=float, default=None, dest="clip_norm")
    tr.add_argument("--no-figures", action="store_true", dest="no_figures")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint; export RMSE, predictions, figures")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out-dir", required=True, dest="out_dir")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--baseline-checkpoint", default=None, dest="baseline_checkpoint")
    ev.add_argument("--no-figures", action="store_true", dest="no_figures")
    ev.set_defaults(func=cmd_eval)

    pd = sub.add_parser("predict", help="one forecast from the tail of a telemetry CSV")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--in", required=True, dest="in_csv")
    pd.add_argument("--out", default=None)
    pd.set_defaults(func=cmd_predict)

    mo = sub.add_parser("monitor", help="run the early-warning loop over a CSV stream")
    mo.add_argument("--checkpoint", required=True)
    mo.add_argument("--in", required=True, dest="in_path", help="CSV path or '-' for stdin")
    mo.add_argument("--sink-file", default=None, dest="sink_file")
    mo.add_argument("--cadence", type=int, default=60, help="seconds between predictions")
    mo.add_argument("--replay-speed", type=float, default=0.0, dest="replay_speed",
                    help="frames per wall second; 0 = as fast as possible")
    mo.add_argument("--pm25-limit", type=float, default=None, dest="pm25_limit")
    mo.add_argument("--pc03-limit", type=float, default=None, dest="pc03_limit")
    mo.add_argument("--hysteresis", type=int, default=None)
    mo.set_defaults(func=cmd_monitor)

    rt = sub.add_parser("retrain", help="retrain a checkpoint on a new telemetry corpus")
    rt.add_argument("--checkpoint", required=True)
    rt.add_argument("--data", required=True, help="new telemetry CSV")
    rt.add_argument("--out", required=True, help="new checkpoint path")
    rt.add_argument("--epochs", type=int, default=None)
    rt.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    rt.add_argument("--lr", type=float, default=None)
    rt.add_argument("--patience", type=int, default=None)
    rt.add_argument("--clip-norm", type=float, default=None, dest="clip_norm")
    rt.set_defaults(func=cmd_retrain)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args.config) if args.config else {}
        return args.func(args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
