"""Threshold early-warning state machine and the streaming monitor loop.

A channel alarms when any step of the forecast horizon strictly exceeds
its limit; it clears only after the whole horizon has stayed at or below
the limit for a configured number of consecutive evaluations, which
keeps the alarm from flapping around the boundary.
"""

from __future__ import annotations

import json
import sys
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import ForecastModel
from .telemetry import TelemetryFrame

# ISO-14644 class 3 limits >=0.3 um particles to 102 per m^3; one PMSA
# sample volume is 0.1 L = 1/10000 m^3, hence 0.0102 per 0.1 L. At that
# scale any nonzero predicted count alarms; the limit is overridable.
ISO14644_CLASS3_PC03_PER_DL = 0.0102

DEFAULT_UNITS = {"pm2_5_ugm3": "ugm3", "pc0_3": "per_0.1L"}


@dataclass(frozen=True)
class ThresholdConfig:
    pm25_mass_limit_ugm3: float = 35.0
    pm03_count_limit_per_dl: float = ISO14644_CLASS3_PC03_PER_DL
    clear_hysteresis_steps: int = 3

    def validate(self) -> None:
        if self.pm25_mass_limit_ugm3 < 0 or self.pm03_count_limit_per_dl < 0:
            raise DataError("threshold limits must be non-negative")
        if self.clear_hysteresis_steps < 1:
            raise DataError("clear_hysteresis_steps must be >= 1")

    def limits(self) -> dict[str, float]:
        """channel -> limit, for the channels this config watches."""
        return {
            "pm2_5_ugm3": self.pm25_mass_limit_ugm3,
            "pc0_3": self.pm03_count_limit_per_dl,
        }


@dataclass(frozen=True)
class AlarmEvent:
    ts: int                 # when the evaluation happened
    predicted_for: int      # the forecast step that triggered/cleared
    channel: str
    value: float
    unit: str
    threshold: float
    transition: str         # "RAISED" or "CLEARED"
    model_id: str

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "ts": self.ts,
                "predicted_for": self.predicted_for,
                "channel": self.channel,
                "value": self.value,
                "unit": self.unit,
                "threshold": self.threshold,
                "transition": self.transition,
                "model_id": self.model_id,
            },
            sort_keys=False,
        )


@dataclass(frozen=True)
class AlarmState:
    """Pure-value alarm bookkeeping; evaluate_thresholds returns a new one."""

    alarmed: dict[str, bool] = field(default_factory=dict)
    below_count: dict[str, int] = field(default_factory=dict)

    @classmethod
    def initial(cls, channels) -> "AlarmState":
        return cls(
            alarmed={c: False for c in channels},
            below_count={c: 0 for c in channels},
        )


def evaluate_thresholds(
    prediction: dict[str, np.ndarray],
    cfg: ThresholdConfig,
    state: AlarmState,
    now_ts: int,
    horizon_start_ts: int,
    model_id: str = "",
) -> tuple[list[AlarmEvent], AlarmState]:
    """Compare a raw-unit horizon forecast against the configured limits.

    prediction maps channel name -> horizon array in raw units. The
    trigger rule is strict ">"; a value exactly at the limit never
    alarms. Pure function of its arguments.
    """
    cfg.validate()
    events: list[AlarmEvent] = []
    alarmed = dict(state.alarmed)
    below = dict(state.below_count)
    for channel, limit in cfg.limits().items():
        if channel not in prediction:
            raise DataError(f"threshold channel {channel!r} missing from prediction")
        horizon = np.asarray(prediction[channel], dtype=np.float64)
        exceed = horizon > limit
        was_alarmed = alarmed.get(channel, False)
        if exceed.any():
            below[channel] = 0
            if not was_alarmed:
                step = int(np.argmax(horizon))
                events.append(
                    AlarmEvent(
                        ts=now_ts,
                        predicted_for=horizon_start_ts + step,
                        channel=channel,
                        value=float(horizon[step]),
                        unit=DEFAULT_UNITS.get(channel, ""),
                        threshold=limit,
                        transition="RAISED",
                        model_id=model_id,
                    )
                )
                alarmed[channel] = True
        else:
            if was_alarmed:
                below[channel] = below.get(channel, 0) + 1
                if below[channel] >= cfg.clear_hysteresis_steps:
                    step = int(np.argmax(horizon))
                    events.append(
                        AlarmEvent(
                            ts=now_ts,
                            predicted_for=horizon_start_ts + step,
                            channel=channel,
                            value=float(horizon[step]),
                            unit=DEFAULT_UNITS.get(channel, ""),
                            threshold=limit,
                            transition="CLEARED",
                            model_id=model_id,
                        )
                    )
                    alarmed[channel] = False
                    below[channel] = 0
            else:
                below[channel] = 0
    return events, AlarmState(alarmed=alarmed, below_count=below)


def schedule_retrain(anchor_s: int, now_s: int, period_days: int = 30) -> bool:
    """Retrain is due once the anchor is a full period in the past.

    A "month" is exactly 30 days; the caller advances the anchor to the
    retrain time on completion.
    """
    if anchor_s > now_s:
        raise DataError("retrain anchor lies in the future")
    return now_s - anchor_s >= period_days * 86400


def emit(event: AlarmEvent, sinks) -> None:
    """Write one line-delimited record per sink; failures never propagate."""
    line = event.to_json_line()
    for sink in sinks:
        try:
            sink.write(line + "\n")
            sink.flush()
        except OSError as exc:
            print(f"alarm sink failure: {exc}", file=sys.stderr)


class Monitor:
    """The continuous ingest -> predict -> compare -> alert loop.

    Frames are consumed in timestamp order into a lookback ring buffer;
    once warm, the model predicts every prediction_cadence_s seconds of
    stream time and the forecast is run through evaluate_thresholds.
    """

    def __init__(
        self,
        model: ForecastModel,
        thresholds: ThresholdConfig | None = None,
        prediction_cadence_s: int = 60,
        sinks=(),
    ):
        self.model = model
        self.thresholds = thresholds or ThresholdConfig()
        self.thresholds.validate()
        self.cadence = prediction_cadence_s
        self.sinks = list(sinks)
        self.state = AlarmState.initial(self.thresholds.limits())
        self.buffer: deque[np.ndarray] = deque(maxlen=model.cfg.lookback)
        self.last_ts: int | None = None
        self.last_pred_ts: int | None = None
        self.frames_seen = 0
        self.frames_rejected = 0
        self.predictions_made = 0
        self.events: list[AlarmEvent] = []
        self._feat_idx = [
            model.norm.channels.index(c) for c in model.feature_channels
        ]
        missing = [c for c in self.thresholds.limits() if c not in model.target_channels]
        if missing:
            raise DataError(f"model does not forecast threshold channels {missing}")

    def tick(self, frame: TelemetryFrame) -> list[AlarmEvent]:
        """Ingest one frame; returns any alarm transitions it produced."""
        if self.last_ts is not None and frame.timestamp_s <= self.last_ts:
            self.frames_rejected += 1
            return []
        values = frame.channel_values()
        if np.isnan(values).any() or not frame.ladder_ok():
            self.frames_rejected += 1
            return []
        self.last_ts = frame.timestamp_s
        self.frames_seen += 1
        row = self.model.norm.normalize(
            values[None, :], self.model.norm.channels
        )[0][self._feat_idx]
        self.buffer.append(row)

        if len(self.buffer) < self.model.cfg.lookback:
            return []
        if self.last_pred_ts is not None and frame.timestamp_s - self.last_pred_ts < self.cadence:
            return []

        self.last_pred_ts = frame.timestamp_s
        self.predictions_made += 1
        x = np.stack(self.buffer)
        out = self.model.forward_normalized(x)
        raw = self.model.norm.denormalize(out, self.model.target_channels)
        raw = np.maximum(raw, 0.0)
        prediction = {
            c: raw[:, j] for j, c in enumerate(self.model.target_channels)
        }
        events, self.state = evaluate_thresholds(
            prediction,
            self.thresholds,
            self.state,
            now_ts=frame.timestamp_s,
            horizon_start_ts=frame.timestamp_s + 1,
            model_id=self.model.model_id,
        )
        for ev in events:
            emit(ev, self.sinks)
        self.events.extend(events)
        return events

    def summary(self) -> dict:
        return {
            "frames": self.frames_seen,
            "rejected": self.frames_rejected,
            "predictions": self.predictions_made,
            "alarms_raised": sum(1 for e in self.events if e.transition == "RAISED"),
            "alarms_cleared": sum(1 for e in self.events if e.transition == "CLEARED"),
        }
