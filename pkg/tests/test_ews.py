"""Threshold semantics, hysteresis, retrain scheduling, and the monitor."""

import io
import json

import numpy as np
import pytest

from cabinpm.errors import DataError
from cabinpm.ews import (
    ISO14644_CLASS3_PC03_PER_DL,
    AlarmEvent,
    AlarmState,
    Monitor,
    ThresholdConfig,
    emit,
    evaluate_thresholds,
    schedule_retrain,
)


def horizon(pm25=0.0, pc03=0.0, n=5):
    return {
        "pm2_5_ugm3": np.full(n, pm25),
        "pc0_3": np.full(n, pc03),
    }


def initial_state():
    return AlarmState.initial(("pm2_5_ugm3", "pc0_3"))


class TestThresholds:
    def test_exactly_at_limit_no_event(self):
        events, state = evaluate_thresholds(
            horizon(pm25=35.0), ThresholdConfig(), initial_state(), 10, 11
        )
        assert events == []
        assert not state.alarmed["pm2_5_ugm3"]

    def test_epsilon_above_limit_raises(self):
        events, state = evaluate_thresholds(
            horizon(pm25=35.0 + 1e-9), ThresholdConfig(), initial_state(), 10, 11
        )
        assert [e.transition for e in events] == ["RAISED"]
        assert events[0].channel == "pm2_5_ugm3"
        assert state.alarmed["pm2_5_ugm3"]

    def test_any_horizon_step_triggers(self):
        pred = horizon()
        pred["pm2_5_ugm3"][3] = 50.0
        events, _ = evaluate_thresholds(
            pred, ThresholdConfig(), initial_state(), 100, 101
        )
        assert len(events) == 1
        assert events[0].predicted_for == 101 + 3
        assert events[0].value == 50.0

    def test_default_pc03_limit_is_iso_class3(self):
        cfg = ThresholdConfig()
        assert cfg.pm03_count_limit_per_dl == ISO14644_CLASS3_PC03_PER_DL == 0.0102
        events, _ = evaluate_thresholds(
            horizon(pc03=1.0), cfg, initial_state(), 0, 1
        )
        assert [e.channel for e in events] == ["pc0_3"]

    def test_no_repeat_raise_while_alarmed(self):
        cfg = ThresholdConfig()
        state = initial_state()
        events, state = evaluate_thresholds(horizon(pm25=40.0), cfg, state, 0, 1)
        assert len(events) == 1
        events, state = evaluate_thresholds(horizon(pm25=45.0), cfg, state, 1, 2)
        assert events == []

    def test_missing_channel_rejected(self):
        with pytest.raises(DataError, match="pc0_3"):
            evaluate_thresholds(
                {"pm2_5_ugm3": np.zeros(3)}, ThresholdConfig(), initial_state(), 0, 1
            )

    def test_invalid_config_rejected(self):
        with pytest.raises(DataError):
            ThresholdConfig(pm25_mass_limit_ugm3=-1.0).validate()
        with pytest.raises(DataError):
            ThresholdConfig(clear_hysteresis_steps=0).validate()


class TestHysteresis:
    def test_clears_only_after_n_consecutive_below(self):
        cfg = ThresholdConfig(clear_hysteresis_steps=3)
        state = initial_state()
        _, state = evaluate_thresholds(horizon(pm25=40.0), cfg, state, 0, 1)
        for k in range(2):
            events, state = evaluate_thresholds(horizon(pm25=1.0), cfg, state, k + 1, k + 2)
            assert events == []
            assert state.alarmed["pm2_5_ugm3"]
        events, state = evaluate_thresholds(horizon(pm25=1.0), cfg, state, 3, 4)
        assert [e.transition for e in events] == ["CLEARED"]
        assert not state.alarmed["pm2_5_ugm3"]

    def test_excursion_resets_the_count(self):
        cfg = ThresholdConfig(clear_hysteresis_steps=3)
        state = initial_state()
        _, state = evaluate_thresholds(horizon(pm25=40.0), cfg, state, 0, 1)
        _, state = evaluate_thresholds(horizon(pm25=1.0), cfg, state, 1, 2)
        _, state = evaluate_thresholds(horizon(pm25=1.0), cfg, state, 2, 3)
        # bounce back above the limit: the clear counter starts over
        _, state = evaluate_thresholds(horizon(pm25=99.0), cfg, state, 3, 4)
        events, state = evaluate_thresholds(horizon(pm25=1.0), cfg, state, 4, 5)
        assert events == []
        assert state.alarmed["pm2_5_ugm3"]

    def test_channels_alternate_independently(self):
        cfg = ThresholdConfig(clear_hysteresis_steps=1)
        state = initial_state()
        ev1, state = evaluate_thresholds(horizon(pm25=40.0, pc03=1.0), cfg, state, 0, 1)
        assert {e.channel for e in ev1} == {"pm2_5_ugm3", "pc0_3"}
        ev2, state = evaluate_thresholds(horizon(pm25=1.0, pc03=1.0), cfg, state, 1, 2)
        assert [(e.channel, e.transition) for e in ev2] == [("pm2_5_ugm3", "CLEARED")]
        assert state.alarmed["pc0_3"]

    def test_evaluate_is_pure(self):
        state = initial_state()
        evaluate_thresholds(horizon(pm25=40.0), ThresholdConfig(), state, 0, 1)
        assert not state.alarmed["pm2_5_ugm3"]
        assert state.below_count["pm2_5_ugm3"] == 0


class TestSchedule:
    def test_29_days_not_due(self):
        assert not schedule_retrain(0, 29 * 86400)

    def test_30_days_due(self):
        assert schedule_retrain(0, 30 * 86400)

    def test_custom_period(self):
        assert schedule_retrain(0, 7 * 86400, period_days=7)
        assert not schedule_retrain(0, 7 * 86400 - 1, period_days=7)

    def test_future_anchor_rejected(self):
        with pytest.raises(DataError):
            schedule_retrain(100, 50)


class TestEmit:
    def _event(self):
        return AlarmEvent(
            ts=5, predicted_for=7, channel="pm2_5_ugm3", value=40.0,
            unit="ugm3", threshold=35.0, transition="RAISED", model_id="abc",
        )

    def test_json_line_fields(self):
        line = self._event().to_json_line()
        d = json.loads(line)
        assert d == {
            "ts": 5,
            "predicted_for": 7,
            "channel": "pm2_5_ugm3",
            "value": 40.0,
            "unit": "ugm3",
            "threshold": 35.0,
            "transition": "RAISED",
            "model_id": "abc",
        }

    def test_emit_writes_one_line_per_sink(self):
        a, b = io.StringIO(), io.StringIO()
        emit(self._event(), [a, b])
        assert a.getvalue() == b.getvalue()
        assert a.getvalue().endswith("\n")
        assert json.loads(a.getvalue())

    def test_failing_sink_does_not_propagate(self, capsys):
        class Broken:
            def write(self, _):
                raise OSError("disk full")

            def flush(self):
                pass

        good = io.StringIO()
        emit(self._event(), [Broken(), good])
        assert json.loads(good.getvalue())
        assert "disk full" in capsys.readouterr().err


class TestMonitor:
    def test_rejects_models_without_threshold_channels(self, tiny_trained_model):
        fm, _ = tiny_trained_model
        assert set(ThresholdConfig().limits()) <= set(fm.target_channels)
        # a model trained on other targets is rejected
        other = type(fm)(
            fm.params, fm.cfg, fm.norm, fm.feature_channels,
            tuple(["pc0_5"] * len(fm.target_channels)),
        )
        with pytest.raises(DataError):
            Monitor(other)

    def test_warmup_then_cadence(self, tiny_trained_model, small_frames):
        fm, _ = tiny_trained_model
        mon = Monitor(fm, prediction_cadence_s=30)
        for f in small_frames[: fm.cfg.lookback + 61]:
            mon.tick(f)
        s = mon.summary()
        assert s["frames"] == fm.cfg.lookback + 61
        # first prediction as the buffer fills, then one per 30 s
        assert s["predictions"] == 1 + 61 // 30

    def test_out_of_order_and_nan_frames_rejected(self, tiny_trained_model, small_frames):
        fm, _ = tiny_trained_model
        mon = Monitor(fm)
        mon.tick(small_frames[5])
        mon.tick(small_frames[3])  # stale timestamp
        assert mon.summary()["rejected"] == 1

    def test_events_go_to_sinks(self, tiny_trained_model, small_frames):
        fm, _ = tiny_trained_model
        sink = io.StringIO()
        # limits of 0 make any positive predicted value alarm quickly
        mon = Monitor(
            fm,
            thresholds=ThresholdConfig(
                pm25_mass_limit_ugm3=0.0, pm03_count_limit_per_dl=0.0
            ),
            sinks=[sink],
        )
        for f in small_frames[: fm.cfg.lookback + 120]:
            mon.tick(f)
        if mon.events:
            lines = [l for l in sink.getvalue().splitlines() if l]
            assert len(lines) == len(mon.events)
            assert all(json.loads(l)["model_id"] == fm.model_id for l in lines)
